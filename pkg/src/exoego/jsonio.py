"""
Deterministic JSON serialization for manifests, reports, and config hashing.

Every manifest this package writes must satisfy two rules:

1. Re-running a command over identical inputs produces byte-identical files,
   so the writer is fully deterministic: keys keep insertion order, floats are
   formatted with a fixed rule, and no wall-clock data is embedded.
2. Timestamps and other second-valued fields are written with at least six
   fractional digits.  Floats of ordinary magnitude are emitted as fixed-point
   with nine fractional digits; tiny non-zero values fall back to their exact
   shortest repr (still a valid JSON number) so information is not rounded away.

``loads``/``load`` are plain ``json`` parses; the custom code is only on the
writing side.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any

__all__ = [
    "dumps",
    "dump",
    "loads",
    "load",
    "canonical_hash",
    "derive_seed",
]

_TINY = 1e-6  # below this magnitude, .9f would destroy the value


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite float {x!r} into a manifest")
    x = x + 0.0  # normalize -0.0 to 0.0
    if x != 0.0 and abs(x) < _TINY:
        return repr(x)
    return f"{x:.9f}"


def _write(obj: Any, out: list[str], indent: int) -> None:
    pad = "  " * indent
    if obj is None:
        out.append("null")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(_format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (k, v) in enumerate(items):
            if not isinstance(k, str):
                raise TypeError(f"manifest keys must be strings, got {type(k).__name__}")
            out.append("  " * (indent + 1))
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(": ")
            _write(v, out, indent + 1)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(pad + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append("  " * (indent + 1))
            _write(v, out, indent + 1)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(pad + "]")
    else:
        # numpy scalars arrive here; convert without importing numpy eagerly
        if hasattr(obj, "item") and not hasattr(obj, "__len__"):
            _write(obj.item(), out, indent)
            return
        raise TypeError(
            f"cannot serialize {type(obj).__name__} into a manifest; "
            "convert arrays/objects to plain lists and dicts first"
        )


def dumps(obj: Any) -> str:
    """Serialize ``obj`` to deterministic, human-readable JSON text."""
    out: list[str] = []
    _write(obj, out, 0)
    out.append("\n")
    return "".join(out)


def dump(obj: Any, path: str | Path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def loads(text: str) -> Any:
    return json.loads(text)


def load(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def canonical_hash(obj: Any) -> str:
    """Stable sha256 hex digest of an object's canonical JSON form."""
    return hashlib.sha256(dumps(obj).encode("utf-8")).hexdigest()


def derive_seed(*parts: Any) -> int:
    """
    Derive a stable 63-bit seed from arbitrary labeled parts.

    Used everywhere a sub-seed is needed (per-episode, per-item, per-stage) so
    seeding never depends on call order or on numpy's global state.
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)
