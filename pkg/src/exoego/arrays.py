"""
Flat binary array files with JSON sidecar headers.

One array is stored as two files sharing a base path:

* ``<base>.bin``  — the raw element bytes, C order, little-endian
* ``<base>.json`` — header: shape, dtype (numpy byte-order spelling such as
  ``"<f4"``), plus any caller metadata (``view``, ``fps``, sample times, ...)

The same layout serves frame arrays (stored as 32-bit floats) and checkpoint
parameters (stored at their native precision, normally 64-bit).  Headers are
written with the deterministic serializer so re-writes are byte-identical.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any

import numpy as np

from . import jsonio

__all__ = ["save_array", "load_array", "array_digest", "file_digest"]

_ALLOWED_KINDS = ("f", "i", "u")


def _normalized(arr: np.ndarray) -> np.ndarray:
    """Return ``arr`` as a C-contiguous little-endian array."""
    if arr.dtype.kind not in _ALLOWED_KINDS:
        raise ValueError(f"unsupported array dtype {arr.dtype} (want float or int)")
    dt = arr.dtype.newbyteorder("<")
    return np.ascontiguousarray(arr.astype(dt, copy=False))


def array_digest(arr: np.ndarray) -> str:
    """sha256 over the normalized raw bytes plus the shape/dtype signature."""
    a = _normalized(arr)
    h = hashlib.sha256()
    h.update(str(a.shape).encode())
    h.update(a.dtype.str.encode())
    h.update(a.tobytes())
    return h.hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_array(base: str | Path, arr: np.ndarray, **extra: Any) -> str:
    """
    Write ``<base>.bin`` + ``<base>.json``; returns the sha256 of the .bin bytes.

    ``extra`` fields are stored in the header next to shape/dtype.
    """
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    a = _normalized(arr)
    raw = a.tobytes()
    base.with_suffix(base.suffix + ".bin").write_bytes(raw)
    header = {"shape": list(a.shape), "dtype": a.dtype.str}
    for k, v in extra.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        header[k] = v
    jsonio.dump(header, base.with_suffix(base.suffix + ".json"))
    return hashlib.sha256(raw).hexdigest()


def load_array(base: str | Path) -> tuple[np.ndarray, dict]:
    """Read an array written by :func:`save_array`; returns (array, header)."""
    base = Path(base)
    bin_path = base.with_suffix(base.suffix + ".bin")
    json_path = base.with_suffix(base.suffix + ".json")
    if not bin_path.exists() or not json_path.exists():
        raise FileNotFoundError(f"array files missing for base {base}")
    header = jsonio.load(json_path)
    dtype = np.dtype(header["dtype"])
    shape = tuple(int(s) for s in header["shape"])
    raw = bin_path.read_bytes()
    expected = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"array file {bin_path} has {len(raw)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arr, header
