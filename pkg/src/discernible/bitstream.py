"""On-disk layout of a compressed image (``.dic`` files).

Header (17 bytes, multi-byte integers big-endian)::

    offset size field
    0      4    magic "DIC1"
    4      1    version (1)
    5      2    true_h
    7      2    true_w
    9      2    padded_h
    11     2    padded_w
    13     1    steps
    14     1    channels_per_step
    15     1    grid_h
    16     1    grid_w

The payload follows immediately: one code per 32x32 tile in row-major
tile order; inside a tile bits run step-major, then channel, then latent
row, then latent column. Bit value 1 encodes +1 and 0 encodes -1, packed
most-significant-bit first. The final byte is zero-padded. See
``docs/format.md`` for a worked example.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import PATCH, LatentCode, padded_size
from .errors import CorruptionError, FormatError

MAGIC = b"DIC1"
VERSION = 1
_HEADER = struct.Struct(">4sBHHHHBBBB")
HEADER_SIZE = _HEADER.size


@dataclass(frozen=True)
class Header:
    true_h: int
    true_w: int
    padded_h: int
    padded_w: int
    steps: int
    channels_per_step: int
    grid_h: int
    grid_w: int
    version: int = VERSION

    @property
    def tile_count(self) -> int:
        return (self.padded_h // PATCH) * (self.padded_w // PATCH)

    @property
    def bits_per_tile(self) -> int:
        return self.grid_h * self.grid_w * self.channels_per_step * self.steps

    @property
    def payload_bits(self) -> int:
        return self.tile_count * self.bits_per_tile

    @property
    def payload_bytes(self) -> int:
        return -(-self.payload_bits // 8)

    def to_bytes(self) -> bytes:
        try:
            return _HEADER.pack(
                MAGIC, self.version, self.true_h, self.true_w, self.padded_h, self.padded_w,
                self.steps, self.channels_per_step, self.grid_h, self.grid_w,
            )
        except struct.error as exc:
            raise FormatError(f"header field out of range: {exc}") from exc

    @classmethod
    def from_bytes(cls, data: bytes) -> "Header":
        if len(data) < HEADER_SIZE:
            raise CorruptionError(f"file is {len(data)} bytes, shorter than the {HEADER_SIZE}-byte header")
        magic, version, th, tw, ph, pw, steps, cps, gh, gw = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        hdr = cls(th, tw, ph, pw, steps, cps, gh, gw, version)
        hdr.validate()
        return hdr

    def validate(self) -> None:
        if min(self.true_h, self.true_w) < 1:
            raise FormatError("true image size must be positive")
        if (self.padded_h, self.padded_w) != padded_size(self.true_h, self.true_w):
            raise FormatError(
                f"padded size {self.padded_h}x{self.padded_w} inconsistent with true size "
                f"{self.true_h}x{self.true_w}"
            )
        if min(self.steps, self.channels_per_step, self.grid_h, self.grid_w) < 1:
            raise FormatError("code geometry fields must be positive")


def pack(codes: Sequence[LatentCode], true_dims: tuple[int, int], padded_dims: tuple[int, int] | None = None) -> bytes:
    """Serialise tile codes plus image dimensions to the ``.dic`` byte layout."""
    if not codes:
        raise FormatError("nothing to pack")
    geom = codes[0].geometry
    if any(c.geometry != geom for c in codes):
        raise FormatError("all codes in one file must share the same geometry")
    th, tw = true_dims
    if padded_dims is None:
        padded_dims = padded_size(th, tw)
    steps, cps, gh, gw = geom
    hdr = Header(th, tw, padded_dims[0], padded_dims[1], steps, cps, gh, gw)
    hdr.validate()
    if len(codes) != hdr.tile_count:
        raise FormatError(f"{len(codes)} codes but padded size {padded_dims} has {hdr.tile_count} tiles")
    bits = np.concatenate([c.bits for c in codes]) > 0
    return hdr.to_bytes() + np.packbits(bits, bitorder="big").tobytes()


def unpack(data: bytes) -> tuple[list[LatentCode], tuple[int, int], tuple[int, int]]:
    """Inverse of :func:`pack`: ``(codes, (true_h, true_w), (padded_h, padded_w))``."""
    hdr = Header.from_bytes(data)
    payload = data[HEADER_SIZE:]
    if len(payload) != hdr.payload_bytes:
        raise CorruptionError(
            f"payload is {len(payload)} bytes, header implies {hdr.payload_bytes} "
            f"({hdr.payload_bits} bits)"
        )
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=hdr.payload_bits, bitorder="big")
    bipolar = bits.astype(np.int8) * 2 - 1
    per = hdr.bits_per_tile
    codes = [
        LatentCode(bipolar[i * per:(i + 1) * per], hdr.grid_h, hdr.grid_w, hdr.channels_per_step, hdr.steps)
        for i in range(hdr.tile_count)
    ]
    return codes, (hdr.true_h, hdr.true_w), (hdr.padded_h, hdr.padded_w)


def read_header(data: bytes) -> Header:
    return Header.from_bytes(data)
