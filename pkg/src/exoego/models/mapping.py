"""
Feature-space mapping networks between the two views.

The standard mapping is a bottleneck residual stack: a down-projection to half
width, nine residual blocks (two affine layers + tanh + skip each), and an
up-projection back to the feature width.  With all residual-block weights at
zero the stack is exactly the identity, so the whole map reduces to
up(down(x)) — a property pinned by tests.

``FcMapping`` is the deliberately weaker swap-in used by ablations: a plain
two-layer fully-connected net with no skip structure.

Both operate frame-wise: any (..., d) input works.
"""

from __future__ import annotations

import numpy as np

from .core import Linear, Module, tanh_backward, tanh_forward

__all__ = ["ResidualAffineBlock", "MappingNet", "FcMapping", "map_apply", "map_apply_with_cache"]


class ResidualAffineBlock(Module):
    """x + fc2(tanh(fc1(x))) at a fixed width."""

    def __init__(self, width: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.add_module("fc1", Linear(width, width, rng))
        self.add_module("fc2", Linear(width, width, rng))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, c1 = self._mods["fc1"].forward(x)
        a, ca = tanh_forward(h)
        r, c2 = self._mods["fc2"].forward(a)
        return x + r, (c1, ca, c2)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        c1, ca, c2 = cache
        da = self._mods["fc2"].backward(c2, dy)
        dh = tanh_backward(ca, da)
        return dy + self._mods["fc1"].backward(c1, dh)


class MappingNet(Module):
    def __init__(
        self,
        d: int,
        rng: np.random.Generator,
        hidden: int | None = None,
        n_blocks: int = 9,
    ) -> None:
        super().__init__()
        self.d = d
        self.hidden = hidden if hidden is not None else d // 2
        if self.hidden < 1:
            raise ValueError("mapping bottleneck width must be at least 1")
        self.n_blocks = n_blocks
        self.add_module("down", Linear(d, self.hidden, rng))
        for i in range(n_blocks):
            self.add_module(f"res.{i}", ResidualAffineBlock(self.hidden, rng))
        self.add_module("up", Linear(self.hidden, d, rng))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, cd = self._mods["down"].forward(x)
        caches = []
        for i in range(self.n_blocks):
            h, cb = self._mods[f"res.{i}"].forward(h)
            caches.append(cb)
        y, cu = self._mods["up"].forward(h)
        return y, (cd, caches, cu)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        cd, caches, cu = cache
        dh = self._mods["up"].backward(cu, dy)
        for i in reversed(range(self.n_blocks)):
            dh = self._mods[f"res.{i}"].backward(caches[i], dh)
        return self._mods["down"].backward(cd, dh)


class FcMapping(Module):
    """Ablation mapping: two affine layers around a tanh, no skips."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int | None = None) -> None:
        super().__init__()
        self.d = d
        self.hidden = hidden if hidden is not None else d // 2
        self.add_module("fc1", Linear(d, self.hidden, rng))
        self.add_module("fc2", Linear(self.hidden, d, rng))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, c1 = self._mods["fc1"].forward(x)
        a, ca = tanh_forward(h)
        y, c2 = self._mods["fc2"].forward(a)
        return y, (c1, ca, c2)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        c1, ca, c2 = cache
        da = self._mods["fc2"].backward(c2, dy)
        dh = tanh_backward(ca, da)
        return self._mods["fc1"].backward(c1, dh)


def map_apply_with_cache(net: Module, feats: np.ndarray) -> tuple[np.ndarray, tuple]:
    if feats.shape[-1] != net.d:
        raise ValueError(f"mapping expects feature dim {net.d}, got {feats.shape[-1]}")
    if not np.all(np.isfinite(feats)):
        raise ValueError("mapping input contains non-finite values")
    return net.forward(feats)


def map_apply(net: Module, feats: np.ndarray) -> np.ndarray:
    """Apply a mapping net frame-wise; output shape equals input shape."""
    return map_apply_with_cache(net, feats)[0]
