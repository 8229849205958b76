"""Mini-batch training of the codec under the composite objective

    L = recon + lambda * perceptual + gamma * MMD^2

where ``recon`` is the per-pixel mean squared error (averaged over
residual-step prefixes when training several steps), ``perceptual`` the
mean squared feature distance through the frozen extractor, and ``MMD^2``
the multi-kernel discrepancy between the batch's original and decoded
feature sets. Only codec parameters receive gradients.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .checkpoint import checksum
from .codec import CodecArch, CodecModel, Quantizer, to_nchw
from .errors import ConfigError, NumericError
from .mmd import KernelMixture, mmd_squared, resolve_mixture
from .perceptual import FeatureExtractor, feature_distance

log = logging.getLogger(__name__)

# Conversion from the reference loss weights to this repo's units. The
# reconstruction term here is a per-pixel mean on [0, 1] images and the
# extractor is a small network of its own, so neither weight carries over
# unchanged. Both factors were calibrated on short runs of the proxy task:
# lam = 1e-6 * LAMBDA_RESCALE and gamma = 1 * GAMMA_RESCALE.
LAMBDA_RESCALE = 10.0
GAMMA_RESCALE = 0.03

REF_LAMBDA = 1e-6
REF_GAMMA = 1.0
REF_BATCH = 192
REF_EPOCHS = 200
REF_KERNELS = 8

SWEEP_LAMBDAS = (1e-4, 1e-5, 1e-6, 1e-7)


@dataclass
class TrainConfig:
    lam: float = REF_LAMBDA * LAMBDA_RESCALE
    gamma: float = REF_GAMMA * GAMMA_RESCALE
    batch_size: int = 64
    epochs: int = 50
    learning_rate: float = 1e-3
    seed: int = 0
    kernel_mixture: str | list | KernelMixture = "median-ladder"
    steps: int = 1
    widths: tuple[int, int] = (32, 64)
    latent_channels: int = 32

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.validate()

    def validate(self) -> None:
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lam must be finite and >= 0, got {self.lam}")
        if not (self.gamma >= 0 and math.isfinite(self.gamma)):
            raise ConfigError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if isinstance(self.kernel_mixture, str) and self.kernel_mixture != "median-ladder":
            raise ConfigError(f"kernel_mixture must be 'median-ladder' or a bandwidth list, got {self.kernel_mixture!r}")

    def arch(self) -> CodecArch:
        return CodecArch(self.widths, self.latent_channels, self.steps, self.seed)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        if isinstance(self.kernel_mixture, KernelMixture):
            d["kernel_mixture"] = list(self.kernel_mixture.bandwidths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


REFERENCE_PRESET = TrainConfig(batch_size=REF_BATCH, epochs=REF_EPOCHS)


@dataclass
class LossBreakdown:
    recon: float
    perceptual: float
    mmd: float
    total: float

    def check(self, lam: float, gamma: float, rtol: float = 1e-9) -> None:
        expected = self.recon + lam * self.perceptual + gamma * self.mmd
        if abs(self.total - expected) > rtol * max(abs(expected), 1e-300):
            raise NumericError(f"loss breakdown does not recombine: {self.total} vs {expected}")


@dataclass
class LossTerms:
    """Tensor-valued terms of one composite-loss evaluation."""

    recon: torch.Tensor
    perceptual: torch.Tensor
    mmd: torch.Tensor
    total: torch.Tensor
    lam: float
    gamma: float

    def breakdown(self) -> LossBreakdown:
        r, p, m = (float(t.detach()) for t in (self.recon, self.perceptual, self.mmd))
        return LossBreakdown(r, p, m, r + self.lam * p + self.gamma * m)


def loss_terms(
    model: CodecModel,
    fx: FeatureExtractor | None,
    batch_x: torch.Tensor,
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
    quantizer: Quantizer | None = None,
) -> LossTerms:
    """Forward pass of the composite objective on an NCHW batch.

    With an extractor present the perceptual and MMD terms are always
    evaluated (for logging); they only carry gradient when weighted.
    """
    n = batch_x.shape[0]
    if cfg.gamma > 0 and n < 2:
        raise ConfigError("MMD term needs a batch of at least 2 patches")
    if fx is None and (cfg.lam > 0 or cfg.gamma > 0):
        raise ConfigError("perceptual or MMD weight set but no feature extractor given")
    y, _, prefixes = model(batch_x, cfg.steps, mode="train", generator=generator,
                           quantizer=quantizer, return_prefixes=True)
    recon = torch.stack([((p - batch_x) ** 2).mean() for p in prefixes]).mean()
    perceptual = mmd = recon.new_zeros(())
    if fx is not None:
        with torch.no_grad():
            f_x = fx(batch_x)
        with torch.set_grad_enabled(torch.is_grad_enabled() and (cfg.lam > 0 or cfg.gamma > 0)):
            f_y = fx(y)
            perceptual = feature_distance(f_x, f_y)
            if n >= 2:
                mmd = mmd_squared(f_x, f_y, resolve_mixture(cfg.kernel_mixture, f_x))
    total = recon
    if cfg.lam > 0:
        total = total + cfg.lam * perceptual
    if cfg.gamma > 0:
        total = total + cfg.gamma * mmd
    return LossTerms(recon, perceptual, mmd, total, cfg.lam, cfg.gamma)


def composite_loss(
    model: CodecModel,
    fx: FeatureExtractor | None,
    batch_x: torch.Tensor,
    cfg: TrainConfig,
    generator: torch.Generator | None = None,
    quantizer: Quantizer | None = None,
) -> tuple[LossBreakdown, dict[str, torch.Tensor]]:
    """Loss breakdown plus gradients for every codec parameter (by name).

    The returned gradients never include extractor parameters; the model's
    ``.grad`` fields are left untouched.
    """
    terms = loss_terms(model, fx, batch_x, cfg, generator, quantizer)
    names, params = zip(*[(k, p) for k, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(terms.total, params, allow_unused=True)
    out = {k: (g if g is not None else torch.zeros_like(p)) for k, g, p in zip(names, grads, params)}
    return terms.breakdown(), out


@dataclass
class EpochRecord:
    epoch: int
    recon: float
    perceptual: float
    mmd: float
    total: float
    wall_seconds: float


@dataclass
class TrainResult:
    model: CodecModel
    log: list[EpochRecord] = field(default_factory=list)
    fx_checksum_before: str | None = None
    fx_checksum_after: str | None = None

    def write_log(self, path, include_timing: bool = True) -> None:
        """Epoch CSV. Without timing the file is byte-reproducible across reruns."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "recon", "perceptual", "mmd", "total"] + ["wall_seconds"] * include_timing)
            for r in self.log:
                row = [r.epoch, repr(r.recon), repr(r.perceptual), repr(r.mmd), repr(r.total)]
                w.writerow(row + [f"{r.wall_seconds:.3f}"] * include_timing)

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_seconds"])
            w.writerows([r.epoch, f"{r.wall_seconds:.3f}"] for r in self.log)


def _first_nonfinite(terms: LossTerms) -> str | None:
    for name in ("recon", "perceptual", "mmd", "total"):
        if not torch.isfinite(getattr(terms, name)):
            return name
    return None


def train(
    patches: np.ndarray | torch.Tensor,
    cfg: TrainConfig,
    fx: FeatureExtractor | None = None,
    model: CodecModel | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Optimise a codec on ``(N, 32, 32, 3)`` patches.

    Adam with cosine learning-rate decay; the batch order and the
    binarizer's noise come from generators seeded by ``cfg.seed``, so equal
    seed, config and data give bit-identical parameters.
    """
    cfg.validate()
    x_all = patches if torch.is_tensor(patches) else to_nchw(np.asarray(patches))
    if len(x_all) == 0:
        raise ConfigError("empty training set")
    if len(x_all) < 2 and cfg.gamma > 0:
        raise ConfigError("MMD term needs at least 2 training patches")
    if model is None:
        model = CodecModel(cfg.arch())
    else:
        model = copy.deepcopy(model)
    if cfg.steps > model.arch.max_steps:
        raise ConfigError(f"cfg.steps={cfg.steps} exceeds the model's {model.arch.max_steps} steps")
    fx_sum = checksum(fx) if fx is not None else None

    perm_gen = torch.Generator().manual_seed(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    batches_per_epoch = -(-len(x_all) // cfg.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs * batches_per_epoch)
    result = TrainResult(model, fx_checksum_before=fx_sum)
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(4)
        seen = 0
        perm = torch.randperm(len(x_all), generator=perm_gen)
        for i in range(0, len(perm), cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2 and cfg.gamma > 0:
                continue
            terms = loss_terms(model, fx, x_all[idx], cfg, generator=noise_gen)
            bad = _first_nonfinite(terms)
            if bad is not None:
                raise NumericError(f"non-finite {bad} loss at epoch {epoch}, batch starting {i}")
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            opt.step()
            sched.step()
            b = terms.breakdown()
            b.check(cfg.lam, cfg.gamma)
            sums += np.array([b.recon, b.perceptual, b.mmd, b.total]) * len(idx)
            seen += len(idx)
        means = sums / max(seen, 1)
        rec = EpochRecord(epoch, *means.tolist(), time.perf_counter() - t0)
        result.log.append(rec)
        log.info("epoch %d recon %.5f perc %.5f mmd %.5f total %.5f (%.1fs)", epoch, *means, rec.wall_seconds)
        if on_epoch:
            on_epoch(rec)
    model.eval()
    if fx is not None:
        result.fx_checksum_after = checksum(fx)
        if result.fx_checksum_after != fx_sum:
            raise NumericError("feature extractor parameters changed during training")
    return result
