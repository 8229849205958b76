"""Self-describing checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive holding one ``__meta__``
entry (UTF-8 JSON, stored as a uint8 array) plus one array per named
parameter. Arrays are stored with their original dtype, so a save/load
round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from typing import Mapping

import numpy as np
import torch

from .errors import FormatError

META_KEY = "__meta__"


def state_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def save_container(path: str | os.PathLike, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    if META_KEY in arrays:
        raise FormatError(f"parameter name {META_KEY!r} is reserved")
    blob = np.frombuffer(json.dumps(dict(meta), sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **{META_KEY: blob}, **dict(arrays))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_container(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as npz:
            data = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint container ({exc})") from exc
    if META_KEY not in data:
        raise FormatError(f"{path}: missing {META_KEY} entry")
    meta = json.loads(data.pop(META_KEY).tobytes().decode("utf-8"))
    return meta, data


def checksum(module: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        arr = tensor.detach().cpu().contiguous().numpy()
        h.update(str(arr.dtype).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
