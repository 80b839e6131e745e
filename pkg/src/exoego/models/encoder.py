"""
Per-view visual encoder: flatten frames, project, attend across time.

Each view (ego / exo) gets its own encoder instance; the two never share
weights.  Input is a 16-frame sequence; each frame is flattened to a feature
vector, projected to the model width, position-tagged, passed through a small
stack of (non-causal) attention blocks, and projected once more.  The final
projection means a zero-initialized last layer provably yields zero features
regardless of input — a property the tests rely on.
"""

from __future__ import annotations

import numpy as np

from ..synthworld import FRAMES_PER_CLIP, FrameSeq
from .core import Linear, LayerNorm, Module, PositionalEmbedding, TransformerBlock

__all__ = ["VisualEncoder", "encode", "encode_batch"]


class VisualEncoder(Module):
    def __init__(
        self,
        view: str,
        in_dim: int,
        d: int,
        rng: np.random.Generator,
        n_blocks: int = 2,
        n_heads: int = 2,
        n_frames: int = FRAMES_PER_CLIP,
    ) -> None:
        super().__init__()
        if view not in ("ego", "exo"):
            raise ValueError(f"unknown view {view!r}")
        self.view = view
        self.in_dim = in_dim
        self.d = d
        self.n_frames = n_frames
        self.add_module("proj", Linear(in_dim, d, rng))
        self.add_module("pos", PositionalEmbedding(n_frames, d, rng))
        for i in range(n_blocks):
            self.add_module(f"blocks.{i}", TransformerBlock(d, n_heads, rng, causal=False))
        self.n_blocks = n_blocks
        self.add_module("ln_f", LayerNorm(d))
        self.add_module("out", Linear(d, d, rng))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        """x: (B, n_frames, in_dim) -> features (B, n_frames, d)."""
        if x.ndim != 3 or x.shape[1] != self.n_frames or x.shape[2] != self.in_dim:
            raise ValueError(
                f"{self.view} encoder expects (B, {self.n_frames}, {self.in_dim}), "
                f"got {x.shape}"
            )
        h, cp = self._mods["proj"].forward(x)
        h, cpos = self._mods["pos"].forward(h)
        block_caches = []
        for i in range(self.n_blocks):
            h, cb = self._mods[f"blocks.{i}"].forward(h)
            block_caches.append(cb)
        h, cln = self._mods["ln_f"].forward(h)
        y, cout = self._mods["out"].forward(h)
        return y, (cp, cpos, block_caches, cln, cout)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        cp, cpos, block_caches, cln, cout = cache
        dh = self._mods["out"].backward(cout, dy)
        dh = self._mods["ln_f"].backward(cln, dh)
        for i in reversed(range(self.n_blocks)):
            dh = self._mods[f"blocks.{i}"].backward(block_caches[i], dh)
        dh = self._mods["pos"].backward(cpos, dh)
        return self._mods["proj"].backward(cp, dh)


def encode_batch(enc: VisualEncoder, frames: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Encode pre-flattened frames (B, n_frames, in_dim); returns (feats, cache)."""
    if not np.all(np.isfinite(frames)):
        raise ValueError("encoder input contains non-finite values")
    return enc.forward(frames)


def encode(enc: VisualEncoder, clip: FrameSeq) -> np.ndarray:
    """
    Encode one clip; returns frame features of shape (n_frames, d).

    The clip's view tag must match the encoder's view, and the frame count
    must be the fixed per-clip length.
    """
    clip.validate()
    if clip.view != enc.view:
        raise ValueError(f"view mismatch: encoder is {enc.view!r}, clip is {clip.view!r}")
    flat = clip.flat
    if flat.shape[0] != enc.n_frames:
        raise ValueError(
            f"expected {enc.n_frames} frames per clip, got {flat.shape[0]}"
        )
    feats, _ = encode_batch(enc, flat[None, :, :])
    return feats[0]
