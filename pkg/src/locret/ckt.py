"""CKT1 binary tensor container.

Record layout: magic ``CKT1``, u8 rank, rank u32 little-endian extents,
then the payload as f32 little-endian in row-major order. A file may hold
several records back to back; a JSON sidecar (``<file>.json``) names them
in order so parameter bundles stay self-describing.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CKT1"
MAX_RANK = 4


class CktError(ValueError):
    pass


def _check_array(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim < 1 or a.ndim > MAX_RANK:
        raise CktError(f"rank {a.ndim} outside supported 1..{MAX_RANK}")
    if any(e < 1 for e in a.shape):
        raise CktError(f"all extents must be >= 1, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=np.float32)


def _write_record(fh, arr: np.ndarray) -> None:
    a = _check_array(arr)
    fh.write(MAGIC)
    fh.write(struct.pack("<B", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes(order="C"))


def _read_record(fh) -> np.ndarray | None:
    magic = fh.read(4)
    if magic == b"":
        return None
    if magic != MAGIC:
        raise CktError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<B", fh.read(1))
    if rank < 1 or rank > MAX_RANK:
        raise CktError(f"bad rank {rank}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape))
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise CktError("truncated payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float64)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write a single tensor to ``path``."""
    with open(path, "wb") as fh:
        _write_record(fh, arr)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a single tensor (first record) from ``path``."""
    with open(path, "rb") as fh:
        arr = _read_record(fh)
    if arr is None:
        raise CktError(f"{path}: empty file")
    return arr


def write_bundle(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors as consecutive records plus a JSON sidecar."""
    path = Path(path)
    names = list(tensors)
    with open(path, "wb") as fh:
        for name in names:
            _write_record(fh, tensors[name])
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump({"tensors": names}, fh, indent=2)


def read_bundle(path: str | Path) -> dict[str, np.ndarray]:
    """Read a named-tensor bundle written by :func:`write_bundle`."""
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as fh:
        names = json.load(fh)["tensors"]
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for name in names:
            arr = _read_record(fh)
            if arr is None:
                raise CktError(f"{path}: sidecar lists {len(names)} tensors, file has fewer")
            out[name] = arr
    return out
