"""Multi-kernel maximum mean discrepancy between two feature batches.

The estimator is the biased V-statistic

    MMD^2 = (1/n^2) [sum_ii' k(x_i, x_i') + sum_ii' k(y_i, y_i') - 2 sum_ij k(x_i, y_j)]

with ``k`` a convex combination of Gaussian kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ShapeError

SIMPLEX_TOL = 1e-9
LADDER_SIZE = 8


@dataclass(frozen=True)
class KernelMixture:
    bandwidths: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        bw = tuple(float(s) for s in self.bandwidths)
        w = tuple(float(b) for b in self.weights)
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "weights", w)
        if len(bw) == 0 or len(bw) != len(w):
            raise ConfigError("kernel mixture needs equally many (>=1) bandwidths and weights")
        if not all(np.isfinite(s) and s > 0 for s in bw):
            raise ConfigError(f"bandwidths must be finite and > 0, got {bw}")
        if any(b < 0 or not np.isfinite(b) for b in w) or abs(sum(w) - 1.0) > SIMPLEX_TOL:
            raise ConfigError(f"kernel weights must be >= 0 and sum to 1, got {w}")

    @classmethod
    def uniform(cls, bandwidths: Sequence[float]) -> "KernelMixture":
        m = len(bandwidths)
        return cls(tuple(bandwidths), (1.0 / m,) * m)

    @classmethod
    def median_ladder(cls, sigma_med: float, m: int = LADDER_SIZE) -> "KernelMixture":
        """Bandwidths ``sigma_med * 2**(u - m/2)`` for u = 1..m, uniform weights."""
        if not sigma_med > 0:
            raise ConfigError(f"median bandwidth must be > 0, got {sigma_med}")
        return cls.uniform([sigma_med * 2.0 ** (u - m // 2) for u in range(1, m + 1)])


def gaussian_kernel(a, b, sigma: float) -> float:
    """``exp(-||a - b||^2 / (2 sigma^2))`` for two vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"kernel arguments must be equal-length vectors, got {a.shape} and {b.shape}")
    if not sigma > 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    return float(np.exp(-np.sum((a - b) ** 2) / (2.0 * sigma**2)))


def mixture_kernel(a, b, km: KernelMixture) -> float:
    return float(sum(beta * gaussian_kernel(a, b, s) for beta, s in zip(km.weights, km.bandwidths)))


def _sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # explicit differences rather than the |a|^2 + |b|^2 - 2ab expansion:
    # exact zeros on the diagonal and no cancellation for nearby points
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def kernel_matrix(a: torch.Tensor, b: torch.Tensor, km: KernelMixture) -> torch.Tensor:
    d2 = _sq_dists(a, b)
    out = torch.zeros_like(d2)
    for beta, s in zip(km.weights, km.bandwidths):
        if beta:
            out = out + beta * torch.exp(-d2 / (2.0 * s * s))
    return out


def _as_batch(z) -> torch.Tensor:
    t = z if torch.is_tensor(z) else torch.as_tensor(np.asarray(z, dtype=np.float64))
    if t.dim() != 2 or t.shape[0] < 1:
        raise ShapeError(f"feature batch must be (n >= 1, d), got {tuple(t.shape)}")
    return t


def mmd_squared(X, Y, km: KernelMixture) -> torch.Tensor:
    """Biased squared MMD between equal-size batches ``(n, d)``.

    Differentiable with respect to both inputs when they are tensors.
    Returns a 0-dim tensor; callers wanting a float use ``float(...)``.
    """
    X, Y = _as_batch(X), _as_batch(Y)
    if X.shape != Y.shape:
        raise ShapeError(f"MMD batches must have the same shape, got {tuple(X.shape)} and {tuple(Y.shape)}")
    n = X.shape[0]
    kxx = kernel_matrix(X, X, km).sum()
    kyy = kernel_matrix(Y, Y, km).sum()
    kxy = kernel_matrix(X, Y, km).sum()
    return (kxx + kyy - 2.0 * kxy) / (n * n)


def median_distance(X: torch.Tensor) -> float:
    """Median of pairwise Euclidean distances over distinct pairs (i < j)."""
    X = _as_batch(X).detach()
    n = X.shape[0]
    if n < 2:
        raise ConfigError("median heuristic needs at least two feature vectors")
    d = _sq_dists(X, X).sqrt()
    iu = torch.triu_indices(n, n, offset=1)
    med = float(d[iu[0], iu[1]].median())
    return med if med > 0 else 1.0


def resolve_mixture(spec, X: torch.Tensor) -> KernelMixture:
    """Turn a config entry into a mixture for the current batch.

    ``spec`` is either a :class:`KernelMixture`, an explicit list of
    bandwidths (uniform weights) or the string ``"median-ladder"``.
    """
    if isinstance(spec, KernelMixture):
        return spec
    if spec == "median-ladder":
        return KernelMixture.median_ladder(median_distance(X))
    if isinstance(spec, (list, tuple)):
        return KernelMixture.uniform(spec)
    raise ConfigError(f"unknown kernel mixture spec {spec!r}")
