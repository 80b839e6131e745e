"""
Low-rank adapters over selected affine layers.

Wrapping a layer adds a rank-r bypass: ``y = x @ W + b + s * x @ A^T @ B^T``
with scale ``s = alpha / r``, ``A`` of shape (r, in) randomly initialized and
``B`` of shape (out, r) initialized to zero — so a freshly wrapped model
computes exactly what it computed before.  Merging folds the bypass into the
base weight (``W + s * A^T B^T``) and removes the adapter.

Wrapped layers keep their base parameter names unchanged (the adapter only
*adds* ``.lora_a`` / ``.lora_b`` names), which keeps freeze patterns and
checkpoint manifests stable across wrapping.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from fnmatch import fnmatchcase

import numpy as np

from .core import Linear, Module

__all__ = [
    "LoRAConfig",
    "LoRALinear",
    "lora_wrap",
    "lora_merge",
    "lora_param_count",
    "PAPER_LORA",
    "TOY_LORA",
    "DEFAULT_LORA_TARGETS",
]

DEFAULT_LORA_TARGETS = (
    "lm.blocks.*.attn.wq",
    "lm.blocks.*.attn.wk",
    "lm.blocks.*.attn.wv",
    "lm.blocks.*.attn.wo",
)


@dataclass(frozen=True)
class LoRAConfig:
    r: int = 4
    alpha: float = 8.0
    dropout: float = 0.0
    targets: tuple[str, ...] = DEFAULT_LORA_TARGETS

    def validate(self) -> None:
        if self.r < 1:
            raise ValueError("adapter rank must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("adapter dropout must be in [0, 1)")
        if not self.targets:
            raise ValueError("adapter target pattern list is empty")

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def to_json(self) -> dict:
        return {
            "r": self.r,
            "alpha": self.alpha,
            "dropout": self.dropout,
            "targets": list(self.targets),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LoRAConfig":
        return cls(
            r=int(obj["r"]),
            alpha=float(obj["alpha"]),
            dropout=float(obj["dropout"]),
            targets=tuple(obj["targets"]),
        )


# Reference configuration at production scale, and the desk-scale default.
PAPER_LORA = LoRAConfig(r=128, alpha=256.0, dropout=0.1)
TOY_LORA = LoRAConfig(r=4, alpha=8.0, dropout=0.0)


class LoRALinear(Module):
    """A Linear plus a low-rank bypass; base parameter names are inlined."""

    def __init__(
        self,
        base: Linear,
        r: int,
        alpha: float,
        dropout: float,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.base = base
        self.r = r
        self.alpha = alpha
        self.scale = alpha / r
        self.dropout = dropout
        self._rng = rng
        self.add_param("lora_a", rng.normal(0.0, 1.0 / np.sqrt(base.d_in), size=(r, base.d_in)))
        self.add_param("lora_b", np.zeros((base.d_out, r)))

    # -- name inlining -------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.base.named_parameters(prefix)
        out[prefix + "lora_a"] = self.p["lora_a"]
        out[prefix + "lora_b"] = self.p["lora_b"]
        return out

    def named_grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.base.named_grads(prefix)
        out[prefix + "lora_a"] = self.g["lora_a"]
        out[prefix + "lora_b"] = self.g["lora_b"]
        return out

    def zero_grads(self) -> None:
        super().zero_grads()
        self.base.zero_grads()

    def set_training(self, flag: bool) -> None:
        super().set_training(flag)
        self.base.set_training(flag)

    # -- compute -------------------------------------------------------------

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        y, c_base = self.base.forward(x)
        if self._training and self.dropout > 0.0:
            keep = 1.0 - self.dropout
            mask = (self._rng.random(x.shape) < keep) / keep
        else:
            mask = None
        xd = x if mask is None else x * mask
        u = xd @ self.p["lora_a"].T
        y = y + self.scale * (u @ self.p["lora_b"].T)
        return y, (c_base, xd, u, mask)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        c_base, xd, u, mask = cache
        dx = self.base.backward(c_base, dy)
        dy2 = dy.reshape(-1, self.base.d_out)
        u2 = u.reshape(-1, self.r)
        self.g["lora_b"] += self.scale * (dy2.T @ u2)
        du = self.scale * (dy @ self.p["lora_b"])
        du2 = du.reshape(-1, self.r)
        self.g["lora_a"] += du2.T @ xd.reshape(-1, self.base.d_in)
        dxd = du @ self.p["lora_a"]
        if mask is not None:
            dxd = dxd * mask
        return dx + dxd

    def merged_weight(self) -> np.ndarray:
        return self.base.p["w"] + self.scale * (self.p["lora_a"].T @ self.p["lora_b"].T)


def _walk(mod: Module, path: str = ""):
    """Yield (parent, key, child, child_path) over the module tree."""
    for key, child in list(mod._mods.items()):
        child_path = f"{path}{key}"
        yield mod, key, child, child_path
        yield from _walk(child, child_path + ".")


def lora_wrap(
    root: Module, cfg: LoRAConfig, seed: int = 0
) -> list[str]:
    """
    Wrap every affine layer whose path matches a target pattern.

    Returns the wrapped paths.  A pattern that matches nothing is an error, as
    is a pattern matching a non-affine module or an already wrapped layer.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    matched: dict[str, int] = {t: 0 for t in cfg.targets}
    wrapped: list[str] = []
    for parent, key, child, child_path in _walk(root):
        hits = [t for t in cfg.targets if fnmatchcase(child_path, t)]
        if not hits:
            continue
        if isinstance(child, LoRALinear):
            raise ValueError(f"layer {child_path!r} is already wrapped")
        if not isinstance(child, Linear):
            raise ValueError(
                f"adapter target {child_path!r} is a {type(child).__name__}, not an affine layer"
            )
        for t in hits:
            matched[t] += 1
        parent._mods[key] = LoRALinear(child, cfg.r, cfg.alpha, cfg.dropout, rng)
        wrapped.append(child_path)
    unmatched = [t for t, n in matched.items() if n == 0]
    if unmatched:
        raise ValueError(f"adapter target pattern(s) matched nothing: {unmatched}")
    return wrapped


def lora_merge(root: Module) -> Module:
    """
    Return a deep copy of ``root`` with every adapter folded into its base
    weight and removed.  The original model is left untouched.
    """
    merged = copy.deepcopy(root)
    for parent, key, child, _ in _walk(merged):
        if isinstance(child, LoRALinear):
            base = child.base
            base.p["w"] = child.merged_weight()
            parent._mods[key] = base
    return merged


def lora_param_count(root: Module) -> int:
    """Total adapter parameters: sum of r * (in + out) over wrapped layers."""
    total = 0
    for _, _, child, _ in _walk(root):
        if isinstance(child, LoRALinear):
            total += child.r * (child.base.d_in + child.base.d_out)
    return total
