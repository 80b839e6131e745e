"""
Word-level tiny language model with a visual prefix slot.

The LM is a small causal transformer decoder.  A sequence is
``[visual prefix frames..., BOS, tokens...]``: the prefix enters as raw
feature vectors (no embedding lookup), text tokens are embedded, a shared
position table covers the combined length, and the output projection is tied
to the token embedding.  Logits are produced only at text positions; gradient
flows back into the prefix so upstream encoders and mapping nets train
through the language loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Embedding, LayerNorm, Module, PositionalEmbedding, TransformerBlock

__all__ = ["Vocab", "TinyLM", "lm_logits"]

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class Vocab:
    """Whitespace word-level vocabulary with fixed special tokens."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != _SPECIALS:
            raise ValueError("vocabulary must start with the four special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        object.__setattr__(
            self, "_index", {t: i for i, t in enumerate(self.tokens)}
        )

    @classmethod
    def build(cls, texts: Sequence[str]) -> "Vocab":
        words = sorted({w for t in texts for w in t.split()})
        return cls(tokens=_SPECIALS + tuple(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids = [self._index.get(w, UNK) for w in text.split()]
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            words.append(self.tokens[i])
        return " ".join(words)


class TinyLM(Module):
    def __init__(
        self,
        vocab_size: int,
        d: int,
        rng: np.random.Generator,
        n_blocks: int = 2,
        n_heads: int = 2,
        max_len: int = 96,
    ) -> None:
        super().__init__()
        self.vocab_size = vocab_size
        self.d = d
        self.max_len = max_len
        self.n_blocks = n_blocks
        self.add_module("tok", Embedding(vocab_size, d, rng, scale=0.02))
        self.add_module("pos", PositionalEmbedding(max_len, d, rng))
        for i in range(n_blocks):
            self.add_module(f"blocks.{i}", TransformerBlock(d, n_heads, rng, causal=True))
        self.add_module("ln_f", LayerNorm(d))

    # -- full forward/backward over (prefix, input token ids) ---------------

    def forward(
        self, prefix: np.ndarray | None, in_ids: np.ndarray
    ) -> tuple[np.ndarray, tuple]:
        """
        prefix: (B, Tp, d) feature frames or None; in_ids: (B, Tt) int.

        Returns logits (B, Tt, vocab) — one next-token distribution per input
        token position.
        """
        in_ids = np.asarray(in_ids)
        if in_ids.ndim != 2 or in_ids.shape[1] < 1:
            raise ValueError(f"in_ids must be (B, T>=1), got {in_ids.shape}")
        emb, c_tok = self._mods["tok"].forward(in_ids)
        if prefix is not None:
            if prefix.ndim != 3 or prefix.shape[2] != self.d:
                raise ValueError(f"prefix must be (B, Tp, {self.d}), got {prefix.shape}")
            if not np.all(np.isfinite(prefix)):
                raise ValueError("prefix contains non-finite values")
            h = np.concatenate([prefix, emb], axis=1)
            tp = prefix.shape[1]
        else:
            h = emb
            tp = 0
        h, c_pos = self._mods["pos"].forward(h)
        block_caches = []
        for i in range(self.n_blocks):
            h, cb = self._mods[f"blocks.{i}"].forward(h)
            block_caches.append(cb)
        h, c_ln = self._mods["ln_f"].forward(h)
        h_tok = h[:, tp:, :]
        logits = h_tok @ self.p_tok().T
        return logits, (c_tok, c_pos, block_caches, c_ln, h_tok, tp, h.shape)

    def backward(self, cache: tuple, d_logits: np.ndarray) -> np.ndarray | None:
        c_tok, c_pos, block_caches, c_ln, h_tok, tp, h_shape = cache
        emb_w = self.p_tok()
        dh_tok = d_logits @ emb_w
        # tied readout: the embedding table also receives the readout gradient
        self._mods["tok"].g["w"] += np.einsum("btv,btd->vd", d_logits, h_tok)
        dh = np.zeros(h_shape, dtype=dh_tok.dtype)
        dh[:, tp:, :] = dh_tok
        dh = self._mods["ln_f"].backward(c_ln, dh)
        for i in reversed(range(self.n_blocks)):
            dh = self._mods[f"blocks.{i}"].backward(block_caches[i], dh)
        dh = self._mods["pos"].backward(c_pos, dh)
        self._mods["tok"].backward(c_tok, dh[:, tp:, :])
        return dh[:, :tp, :] if tp else None

    def p_tok(self) -> np.ndarray:
        return self._mods["tok"].p["w"]


def lm_logits(
    lm: TinyLM, prefix: np.ndarray | None, tokens: Sequence[int]
) -> np.ndarray:
    """
    Teacher-forcing logits for one sample.

    Row i is the next-token distribution that scores ``tokens[i]`` (the model
    sees the prefix, an implicit begin token, and ``tokens[:i]``).  With an
    empty token list the single first-position distribution is returned, so
    the result always has at least one row.  Shape: (max(len(tokens), 1), V).
    """
    tokens = [int(t) for t in tokens]
    for t in tokens:
        if not 0 <= t < lm.vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {lm.vocab_size}")
    in_ids = np.array([[BOS] + tokens], dtype=np.int64)
    if prefix is not None:
        prefix = np.asarray(prefix, dtype=np.float64)[None, :, :]
    logits, _ = lm.forward(prefix, in_ids)
    n = len(tokens)
    return logits[0, : max(n, 1)]
