"""Convolutional encoder/decoder with a binary bottleneck.

Images are ``H x W x 3`` float arrays in ``[0, 1]``. The codec works on
32x32 patches: three stride-2 convolutions take a patch to a 4x4 grid of
``latent_channels`` tanh activations, which the binarizer turns into
bipolar (+1/-1) bits. The decoder mirrors the encoder with
nearest-neighbour upsampling.

With ``max_steps > 1`` the codec runs in additive residual mode: step ``k``
encodes what the first ``k - 1`` steps failed to reconstruct, and the
decoded image is the clamped sum of every step's contribution. Each step
adds ``grid_h * grid_w * latent_channels`` bits, so the rate grows linearly
with the number of steps used.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import load_container, save_container, state_to_numpy
from .errors import ConfigError, FormatError, NumericError, ShapeError

PATCH = 32
BINARIZE_TOL = 1e-6

Quantizer = Callable[[torch.Tensor, int], torch.Tensor]


def binarize(
    activations: torch.Tensor,
    mode: str = "infer",
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Map activations in [-1, 1] to bipolar bits.

    ``infer`` takes the sign with ``sign(0) = +1``. ``train`` draws +1 with
    probability ``(1 + a) / 2`` and passes the gradient straight through.
    """
    a = activations
    if not torch.isfinite(a).all():
        raise NumericError("binarize: non-finite activation")
    if a.numel() and a.detach().abs().max().item() > 1.0 + BINARIZE_TOL:
        raise NumericError(
            f"binarize: activation {a.detach().abs().max().item():.6g} outside [-1, 1]"
        )
    if mode == "infer":
        return torch.where(a >= 0, torch.ones_like(a), -torch.ones_like(a)).detach()
    if mode == "train":
        u = torch.rand(a.shape, generator=generator, dtype=a.dtype, device=a.device)
        bits = torch.where(u < (1.0 + a.detach()) / 2.0, 1.0, -1.0).to(a.dtype)
        return a + (bits - a).detach()
    raise ConfigError(f"binarize: unknown mode {mode!r}")


class SurrogateBinarizer:
    """Training-mode binarizer that can replay its own noise as constants.

    The first pass samples bits like ``binarize(..., "train")`` and stores
    each step's offset ``bits - activations``. After :meth:`freeze` every
    call returns ``activations + stored_offset``: the same forward values
    for the recorded input, but a smooth function of the activations. Its
    derivative is exactly what the straight-through estimator reports,
    which makes finite-difference checks of the full codec possible.
    """

    def __init__(self, generator: torch.Generator | None = None):
        self.generator = generator
        self.offsets: dict[int, torch.Tensor] = {}
        self.frozen = False

    def freeze(self) -> "SurrogateBinarizer":
        self.frozen = True
        return self

    def __call__(self, activations: torch.Tensor, step: int) -> torch.Tensor:
        if self.frozen:
            return activations + self.offsets[step]
        out = binarize(activations, "train", self.generator)
        self.offsets[step] = (out - activations).detach()
        return out


def _act() -> nn.Module:
    return nn.LeakyReLU(0.1)


def _encoder(widths: Sequence[int], latent_channels: int) -> nn.Sequential:
    w1, w2 = widths
    return nn.Sequential(
        nn.Conv2d(3, w1, 3, stride=2, padding=1), _act(),
        nn.Conv2d(w1, w2, 3, stride=2, padding=1), _act(),
        nn.Conv2d(w2, latent_channels, 3, stride=2, padding=1), nn.Tanh(),
    )


def _decoder(widths: Sequence[int], latent_channels: int) -> nn.Sequential:
    w1, w2 = widths
    up = lambda: nn.Upsample(scale_factor=2, mode="nearest")  # noqa: E731
    return nn.Sequential(
        nn.Conv2d(latent_channels, w2, 3, padding=1), _act(), up(),
        nn.Conv2d(w2, w1, 3, padding=1), _act(), up(),
        nn.Conv2d(w1, w1, 3, padding=1), _act(), up(),
        nn.Conv2d(w1, 3, 3, padding=1),
    )


def init_uniform_fan_in(module: nn.Module, generator: torch.Generator, gain: float = 1.0) -> None:
    """Weights ~ U(-g*sqrt(3/fan_in), g*sqrt(3/fan_in)), biases zero."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = gain * math.sqrt(3.0 / fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.rand(m.weight.shape, generator=generator) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass(frozen=True)
class CodecArch:
    widths: tuple[int, int] = (32, 64)
    latent_channels: int = 32
    max_steps: int = 1
    seed: int = 0

    grid: int = field(default=PATCH // 8, init=False)

    def __post_init__(self):
        if len(self.widths) != 2 or min(self.widths) < 1:
            raise ConfigError(f"widths must be two positive ints, got {self.widths}")
        if not 1 <= self.latent_channels <= 255:
            raise ConfigError("latent_channels must lie in [1, 255]")
        if not 1 <= self.max_steps <= 255:
            raise ConfigError("max_steps must lie in [1, 255]")

    def to_dict(self) -> dict:
        return {
            "kind": "dic-codec",
            "widths": list(self.widths),
            "latent_channels": self.latent_channels,
            "max_steps": self.max_steps,
            "seed": self.seed,
            "patch": PATCH,
            "grid": self.grid,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CodecArch":
        if d.get("kind") != "dic-codec":
            raise FormatError(f"not a codec descriptor: kind={d.get('kind')!r}")
        return cls(tuple(d["widths"]), int(d["latent_channels"]), int(d["max_steps"]), int(d["seed"]))


@dataclass(eq=False)
class LatentCode:
    """Bipolar bits for one 32x32 tile, laid out (steps, channels, grid_h, grid_w)."""

    bits: np.ndarray
    grid_h: int
    grid_w: int
    channels_per_step: int
    steps: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.int8).reshape(-1)
        expected = self.grid_h * self.grid_w * self.channels_per_step * self.steps
        if self.bits.size != expected:
            raise FormatError(f"latent code has {self.bits.size} bits, geometry needs {expected}")
        if not np.all(np.abs(self.bits) == 1):
            raise FormatError("latent code entries must be -1 or +1")

    @property
    def n_bits(self) -> int:
        return self.bits.size

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return (self.steps, self.channels_per_step, self.grid_h, self.grid_w)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.bits.reshape(self.geometry).astype(np.float32)).to(dtype)

    def __eq__(self, other):
        if not isinstance(other, LatentCode):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.bits, other.bits)


class CodecModel(nn.Module):
    """Encoder ``E(theta_1)`` and decoder ``D(theta_2)``, one pair per residual step."""

    def __init__(self, arch: CodecArch | None = None):
        super().__init__()
        self.arch = arch or CodecArch()
        a = self.arch
        self.encoders = nn.ModuleList(_encoder(a.widths, a.latent_channels) for _ in range(a.max_steps))
        self.decoders = nn.ModuleList(_decoder(a.widths, a.latent_channels) for _ in range(a.max_steps))
        gen = torch.Generator().manual_seed(a.seed)
        init_uniform_fan_in(self, gen, gain=math.sqrt(2.0))

    @property
    def bits_per_step(self) -> int:
        return self.arch.latent_channels * self.arch.grid * self.arch.grid

    def encoder_parameters(self):
        return self.encoders.parameters()

    def decoder_parameters(self):
        return self.decoders.parameters()

    def _check_steps(self, steps: int) -> None:
        if not 1 <= steps <= self.arch.max_steps:
            raise ConfigError(f"steps={steps} outside [1, {self.arch.max_steps}]")

    def forward(
        self,
        x: torch.Tensor,
        steps: int = 1,
        mode: str = "infer",
        generator: torch.Generator | None = None,
        quantizer: Quantizer | None = None,
        return_prefixes: bool = False,
    ):
        """Encode and decode a batch ``(N, 3, 32, 32)``.

        Returns ``(decoded, codes)`` where codes is ``(N, steps, C, 4, 4)``.
        With ``return_prefixes`` a third element lists the clamped
        reconstruction after each step.
        """
        self._check_steps(steps)
        _check_batch(x)
        acc = torch.full_like(x, 0.5)
        codes, prefixes = [], []
        for k in range(steps):
            a = self.encoders[k](x - acc)
            if quantizer is not None:
                c = quantizer(a, k)
            else:
                c = binarize(a, mode, generator)
            acc = acc + self.decoders[k](c)
            codes.append(c)
            if return_prefixes:
                prefixes.append(acc.clamp(0.0, 1.0))
        out = acc.clamp(0.0, 1.0)
        codes_t = torch.stack(codes, dim=1)
        if return_prefixes:
            return out, codes_t, prefixes
        return out, codes_t

    @torch.no_grad()
    def encode_batch(self, x: torch.Tensor, steps: int = 1) -> torch.Tensor:
        return self.forward(x, steps, mode="infer")[1]

    def decode_steps(self, codes: torch.Tensor) -> list[torch.Tensor]:
        """Per-step contributions; the first includes the 0.5 starting level."""
        if codes.dim() != 5 or codes.shape[1] > self.arch.max_steps or tuple(codes.shape[2:]) != (
            self.arch.latent_channels,
            self.arch.grid,
            self.arch.grid,
        ):
            raise FormatError(f"code tensor {tuple(codes.shape)} does not fit {self.arch}")
        parts = []
        for k in range(codes.shape[1]):
            part = self.decoders[k](codes[:, k])
            if k == 0:
                part = part + 0.5
            parts.append(part)
        return parts

    def decode_batch(self, codes: torch.Tensor) -> torch.Tensor:
        return torch.stack(self.decode_steps(codes)).sum(0).clamp(0.0, 1.0)

    def save(self, path: str | os.PathLike) -> None:
        save_container(path, self.arch.to_dict(), state_to_numpy(self))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CodecModel":
        meta, arrays = load_container(path)
        model = cls(CodecArch.from_dict(meta))
        state = model.state_dict()
        if set(arrays) != set(state):
            raise FormatError(f"{path}: parameter names do not match the descriptor")
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        model.eval()
        return model


def _check_batch(x: torch.Tensor) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != (3, PATCH, PATCH):
        raise ShapeError(f"expected (N, 3, {PATCH}, {PATCH}) patches, got {tuple(x.shape)}")


def to_nchw(images: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t.permute(0, 3, 1, 2).to(dtype).contiguous()


def to_hwc(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().permute(0, 2, 3, 1).cpu().numpy()


def _param_dtype(model: CodecModel):
    return next(model.parameters()).dtype


def encode(model: CodecModel, patch: np.ndarray, steps: int = 1) -> LatentCode:
    """Inference-mode code for one 32x32x3 patch."""
    patch = np.asarray(patch)
    if patch.shape != (PATCH, PATCH, 3):
        raise ShapeError(f"encode expects a {PATCH}x{PATCH}x3 patch, got {patch.shape}")
    model._check_steps(steps)
    codes = model.encode_batch(to_nchw(patch, _param_dtype(model)), steps)
    return _code_from_tensor(codes[0], model)


def _code_from_tensor(t: torch.Tensor, model: CodecModel) -> LatentCode:
    g = model.arch.grid
    return LatentCode(t.cpu().numpy().astype(np.int8), g, g, model.arch.latent_channels, t.shape[0])


def _check_code(model: CodecModel, code: LatentCode) -> None:
    a = model.arch
    if (code.grid_h, code.grid_w, code.channels_per_step) != (a.grid, a.grid, a.latent_channels):
        raise FormatError(
            f"code geometry {code.geometry} does not match model "
            f"(C={a.latent_channels}, grid={a.grid}x{a.grid})"
        )
    if not 1 <= code.steps <= a.max_steps:
        raise FormatError(f"code has {code.steps} steps, model supports at most {a.max_steps}")


@torch.no_grad()
def decode(model: CodecModel, code: LatentCode) -> np.ndarray:
    _check_code(model, code)
    return to_hwc(model.decode_batch(code.tensor(_param_dtype(model)).unsqueeze(0)))[0]


def padded_size(h: int, w: int) -> tuple[int, int]:
    return (-(-h // PATCH) * PATCH, -(-w // PATCH) * PATCH)


def pad_image(image: np.ndarray) -> np.ndarray:
    """Reflect-pad to the next multiple of 32 on the bottom and right edges."""
    h, w = image.shape[:2]
    ph, pw = padded_size(h, w)
    if (ph, pw) == (h, w):
        return image
    # reflect needs pad < size; fall back to symmetric for tiny images
    mode = "reflect" if (ph - h) < h and (pw - w) < w else "symmetric"
    return np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode=mode)


def tile(image: np.ndarray) -> np.ndarray:
    """Split an ``H x W x 3`` image (multiples of 32) into row-major tiles."""
    h, w, c = image.shape
    t = image.reshape(h // PATCH, PATCH, w // PATCH, PATCH, c).swapaxes(1, 2)
    return t.reshape(-1, PATCH, PATCH, c)


def untile(tiles: np.ndarray, h: int, w: int) -> np.ndarray:
    rows, cols = h // PATCH, w // PATCH
    t = np.asarray(tiles).reshape(rows, cols, PATCH, PATCH, -1).swapaxes(1, 2)
    return t.reshape(h, w, -1)


def _check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {image.shape}")
    if image.shape[0] == 0 or image.shape[1] == 0:
        raise ShapeError("empty image")
    if image.shape[0] > 65535 or image.shape[1] > 65535:
        raise ShapeError("image sides must fit in 16 bits")


@torch.no_grad()
def compress_image(model: CodecModel, image: np.ndarray, steps: int = 1) -> list[LatentCode]:
    """One inference-mode code per 32x32 tile of the padded image, row-major."""
    image = np.asarray(image)
    _check_image(image)
    model._check_steps(steps)
    tiles = tile(pad_image(image))
    codes = model.encode_batch(to_nchw(tiles, _param_dtype(model)), steps)
    return [_code_from_tensor(c, model) for c in codes]


@torch.no_grad()
def decompress_image(model: CodecModel, codes: Sequence[LatentCode], true_h: int, true_w: int) -> np.ndarray:
    """Decode tiles, reassemble them row-major and crop the padding away."""
    ph, pw = padded_size(true_h, true_w)
    n_tiles = (ph // PATCH) * (pw // PATCH)
    if len(codes) != n_tiles:
        raise FormatError(f"{len(codes)} codes for a {ph}x{pw} padded image ({n_tiles} tiles)")
    for c in codes:
        _check_code(model, c)
    dtype = _param_dtype(model)
    batch = torch.stack([c.tensor(dtype) for c in codes])
    tiles = to_hwc(model.decode_batch(batch))
    return untile(tiles, ph, pw)[:true_h, :true_w]
