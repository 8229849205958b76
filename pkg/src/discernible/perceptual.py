"""Frozen feature extractor and the perceptual feature-distance loss.

The extractor is the convolutional trunk of a small classifier trained by
:func:`train_classifier`, cut just before the linear head: post-ReLU
activations of the last conv layer, globally average-pooled. Because it
ends in global pooling it accepts 32x32 patches as well as full images.
"""

from __future__ import annotations

import os
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_container, save_container, state_to_numpy
from .errors import ConfigError, FormatError, ShapeError

# (out_channels, kernel, stride, maxpool_after)
ARCHS: dict[str, list[tuple[int, int, int, bool]]] = {
    # feature-extractor backbone: 5 conv layers, 64-d output
    "plain5": [(16, 3, 1, True), (32, 3, 1, True), (48, 3, 1, False), (64, 3, 1, True), (64, 3, 1, False)],
    # second classifier for cross-architecture checks: strided 5x5 convs, no max pooling
    "strided4": [(24, 5, 2, False), (48, 5, 2, False), (96, 3, 1, False), (96, 3, 2, False)],
}


class Normalize(nn.Module):
    def __init__(self, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _trunk(layers: Sequence[tuple[int, int, int, bool]]) -> nn.Sequential:
    mods: list[nn.Module] = []
    cin = 3
    for cout, k, stride, pool in layers:
        mods += [nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2), nn.ReLU()]
        if pool:
            mods.append(nn.MaxPool2d(2))
        cin = cout
    return nn.Sequential(*mods)


class Classifier(nn.Module):
    """Normalisation, conv trunk, global average pooling and a linear head."""

    def __init__(self, arch: str = "plain5", n_classes: int = 10, mean=(0.5,) * 3, std=(0.25,) * 3, seed: int = 0):
        super().__init__()
        if arch not in ARCHS:
            raise ConfigError(f"unknown classifier architecture {arch!r}; choose from {sorted(ARCHS)}")
        self.arch, self.n_classes, self.seed = arch, n_classes, seed
        torch.manual_seed(seed)
        self.norm = Normalize(mean, std)
        self.trunk = _trunk(ARCHS[arch])
        self.head = nn.Linear(ARCHS[arch][-1][0], n_classes)

    @property
    def feature_dim(self) -> int:
        return self.head.in_features

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(self.norm(x)).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Top-1 labels for ``(N, H, W, 3)`` images."""
        self.eval()
        out = []
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size], dtype=np.float32))
            out.append(self(x.permute(0, 3, 1, 2)).argmax(1).numpy())
        return np.concatenate(out)

    def descriptor(self) -> dict:
        return {
            "kind": "classifier",
            "arch": self.arch,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "mean": self.norm.mean.flatten().tolist(),
            "std": self.norm.std.flatten().tolist(),
        }

    def save(self, path: str | os.PathLike) -> None:
        save_container(path, self.descriptor(), state_to_numpy(self))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Classifier":
        meta, arrays = load_container(path)
        if meta.get("kind") != "classifier":
            raise FormatError(f"{path}: not a classifier checkpoint")
        model = cls(meta["arch"], meta["n_classes"], meta["mean"], meta["std"], meta["seed"])
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        return model.eval()

    def freeze(self) -> "Classifier":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


class FeatureExtractor(nn.Module):
    """Frozen ``F(.)``: normalisation plus the classifier trunk, globally pooled."""

    def __init__(self, norm: Normalize, trunk: nn.Sequential, arch: str = "custom"):
        super().__init__()
        self.norm = norm
        self.trunk = trunk
        self.arch = arch
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @classmethod
    def from_classifier(cls, clf: Classifier) -> "FeatureExtractor":
        import copy

        return cls(copy.deepcopy(clf.norm), copy.deepcopy(clf.trunk), clf.arch)

    @property
    def output_dim(self) -> int:
        return [m for m in self.trunk if isinstance(m, nn.Conv2d)][-1].out_channels

    @property
    def layer_count(self) -> int:
        return sum(isinstance(m, nn.Conv2d) for m in self.trunk)

    def train(self, mode: bool = True):
        # stays in inference mode whatever the caller asks
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(self.norm(x)).mean(dim=(2, 3))

    def save(self, path: str | os.PathLike) -> None:
        meta = {
            "kind": "feature-extractor",
            "arch": self.arch,
            "layers": ARCHS.get(self.arch),
            "output_dim": self.output_dim,
            "mean": self.norm.mean.flatten().tolist(),
            "std": self.norm.std.flatten().tolist(),
        }
        save_container(path, meta, state_to_numpy(self))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FeatureExtractor":
        meta, arrays = load_container(path)
        if meta.get("kind") != "feature-extractor" or not meta.get("layers"):
            raise FormatError(f"{path}: not a feature-extractor checkpoint")
        fx = cls(Normalize(meta["mean"], meta["std"]), _trunk([tuple(l) for l in meta["layers"]]), meta["arch"])
        fx.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        if fx.output_dim != meta["output_dim"]:
            raise FormatError(f"{path}: output_dim mismatch")
        for p in fx.parameters():
            p.requires_grad_(False)
        return fx


def extract(fx: Callable[[torch.Tensor], torch.Tensor], patch) -> np.ndarray:
    """Feature vector of one 32x32x3 patch."""
    patch = np.asarray(patch)
    if patch.shape != (32, 32, 3):
        raise ShapeError(f"extract expects a 32x32x3 patch, got {patch.shape}")
    dtype = next(fx.parameters()).dtype if isinstance(fx, nn.Module) else torch.float32
    x = torch.from_numpy(patch).to(dtype).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        return fx(x)[0].numpy()


def feature_distance(fx_orig: torch.Tensor, fx_dec: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of squared Euclidean feature distances."""
    if fx_orig.shape != fx_dec.shape:
        raise ShapeError(f"feature batches differ: {tuple(fx_orig.shape)} vs {tuple(fx_dec.shape)}")
    return ((fx_dec - fx_orig) ** 2).sum(dim=1).mean()


def perceptual_loss(fx: Callable[[torch.Tensor], torch.Tensor], originals: torch.Tensor, decoded: torch.Tensor) -> torch.Tensor:
    """``(1/n) sum_i ||F(decoded_i) - F(original_i)||^2`` for NCHW batches.

    Gradients flow into ``decoded`` only.
    """
    if originals.shape[0] != decoded.shape[0] or originals.shape[0] < 1:
        raise ShapeError(f"batch sizes differ or are empty: {originals.shape[0]} vs {decoded.shape[0]}")
    with torch.no_grad():
        f_orig = fx(originals)
    return feature_distance(f_orig, fx(decoded))


def channel_stats(images: np.ndarray) -> tuple[list[float], list[float]]:
    flat = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    return flat.mean(0).tolist(), (flat.std(0) + 1e-6).tolist()


def train_classifier(
    images: np.ndarray,
    labels: np.ndarray,
    arch: str = "plain5",
    epochs: int = 12,
    batch_size: int = 64,
    crop: int | None = 32,
    lr: float = 2e-3,
    seed: int = 0,
    log: Callable[[str], None] | None = None,
) -> Classifier:
    """Fit a classifier on ``(N, H, W, 3)`` images; returns it frozen.

    Each step sees one random ``crop x crop`` window per image (global
    pooling makes the trained network size-agnostic, and crops are much
    cheaper than full images).
    No flip augmentation: mirroring swaps the two diagonal classes.
    """
    if len(images) != len(labels) or len(images) == 0:
        raise ConfigError("images and labels must be non-empty and aligned")
    mean, std = channel_stats(images)
    n_classes = int(labels.max()) + 1
    clf = Classifier(arch, n_classes, mean, std, seed)
    gen = torch.Generator().manual_seed(seed)
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2)
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    steps = epochs * -(-len(x_all) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    clf.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        total, correct = 0.0, 0
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if crop and crop < min(xb.shape[-2:]):
                oy = int(torch.randint(0, xb.shape[-2] - crop + 1, (1,), generator=gen))
                ox = int(torch.randint(0, xb.shape[-1] - crop + 1, (1,), generator=gen))
                xb = xb[..., oy:oy + crop, ox:ox + crop]
            logits = clf(xb)
            loss = F.cross_entropy(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
        if log:
            log(f"[{arch}] epoch {epoch + 1}/{epochs} loss {total / len(perm):.4f} acc {correct / len(perm):.3f}")
    return clf.freeze()
