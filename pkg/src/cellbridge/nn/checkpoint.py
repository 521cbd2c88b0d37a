"""Versioned binary checkpoint format shared by all models.

Layout: magic "ULCK", format version (u32 LE), then for each tensor:
name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
row-major float64 little-endian payload. Tensors are written in the
order given, so identical state produces byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from ..errors import InvalidDataError

MAGIC = b"ULCK"
VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, "np.ndarray | Tensor"]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, value in tensors.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype="<f8")
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise InvalidDataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise InvalidDataError(f"{path}: unsupported checkpoint version {version}")
    offset = 8
    out: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        out[name] = data.reshape(dims).astype(np.float64)
    return out


def restore_parameters(params: Mapping[str, Tensor], stored: Mapping[str, np.ndarray]) -> None:
    """Copy stored arrays into live parameter tensors, validating names/shapes."""
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise InvalidDataError(
            f"checkpoint mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}"
        )
    for name, tensor in params.items():
        value = stored[name]
        if value.shape != tensor.data.shape:
            raise InvalidDataError(
                f"checkpoint tensor '{name}' has shape {value.shape}, expected {tensor.data.shape}"
            )
        tensor.data = value.copy()
