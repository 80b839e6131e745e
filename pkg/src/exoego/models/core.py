"""
Minimal module system: numpy layers with hand-written backward passes.

Design rules, chosen so the training contracts stay checkable:

* Every module owns its parameters in ``self.p`` (name -> ndarray) and
  matching gradient buffers in ``self.g``.  ``named_parameters()`` walks the
  tree and yields dotted, stable names ("blocks.0.attn.wq.w") — checkpoints,
  freeze sets, and optimizer state are all keyed by these names.
* ``forward`` returns ``(output, cache)`` and ``backward(cache, d_out)``
  returns the input gradient while *accumulating* parameter gradients into
  ``self.g``.  Caches are external so one module may be applied several times
  within a step (the cycle losses apply the mapping nets twice).
* No global RNG: construction takes a ``numpy.random.Generator``.
* Everything is dtype-agnostic; float64 is the default throughout so the
  finite-difference checks operate at full precision.

The backward formulas are the standard closed forms; they are verified
end-to-end against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "Embedding",
    "PositionalEmbedding",
    "CausalSelfAttention",
    "Mlp",
    "TransformerBlock",
    "tanh_forward",
    "tanh_backward",
    "gelu_forward",
    "gelu_backward",
    "softmax",
    "log_softmax",
]


# ---------------------------------------------------------------------------
# Module base
# ---------------------------------------------------------------------------


class Module:
    """Base class: parameter/gradient registry plus dotted-name traversal."""

    def __init__(self) -> None:
        self.p: dict[str, np.ndarray] = {}
        self.g: dict[str, np.ndarray] = {}
        self._mods: dict[str, Module] = {}
        self._training = False

    # -- registration -------------------------------------------------------

    def add_param(self, name: str, arr: np.ndarray) -> np.ndarray:
        if name in self.p or name in self._mods:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.p[name] = arr
        self.g[name] = np.zeros_like(arr)
        return arr

    def add_module(self, name: str, mod: "Module") -> "Module":
        if name in self._mods or name in self.p:
            raise ValueError(f"duplicate module name {name!r}")
        self._mods[name] = mod
        return mod

    # -- traversal ----------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, arr in self.p.items():
            out[prefix + name] = arr
        for name, mod in self._mods.items():
            out.update(mod.named_parameters(prefix + name + "."))
        return out

    def named_grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, arr in self.g.items():
            out[prefix + name] = arr
        for name, mod in self._mods.items():
            out.update(mod.named_grads(prefix + name + "."))
        return out

    def named_modules(self, prefix: str = "") -> dict[str, "Module"]:
        out: dict[str, Module] = {prefix.rstrip("."): self} if prefix else {"": self}
        for name, mod in self._mods.items():
            out.update(mod.named_modules(prefix + name + "."))
        return out

    def zero_grads(self) -> None:
        for arr in self.g.values():
            arr[...] = 0.0
        for mod in self._mods.values():
            mod.zero_grads()

    def set_training(self, flag: bool) -> None:
        self._training = flag
        for mod in self._mods.values():
            mod.set_training(flag)

    def param_count(self) -> int:
        return int(sum(a.size for a in self.named_parameters().values()))


# ---------------------------------------------------------------------------
# Activations (stateless helpers)
# ---------------------------------------------------------------------------


def tanh_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.tanh(x)
    return y, y


def tanh_backward(cache: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (1.0 - cache * cache)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)
    return y, (x, t)


def gelu_backward(cache: tuple, dy: np.ndarray) -> np.ndarray:
    x, t = cache
    du_dx = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    dy_dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du_dx
    return dy * dy_dx


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Linear(Module):
    """Affine map over the last axis: y = x @ w + b."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        scale: float | None = None,
        zero_init: bool = False,
    ) -> None:
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            s = scale if scale is not None else 1.0 / np.sqrt(d_in)
            w = rng.normal(0.0, s, size=(d_in, d_out))
        self.add_param("w", w)
        self.add_param("b", np.zeros(d_out))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x @ self.p["w"] + self.p["b"], x

    def backward(self, cache: np.ndarray, dy: np.ndarray) -> np.ndarray:
        x = cache
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        self.g["w"] += x2.T @ dy2
        self.g["b"] += dy2.sum(axis=0)
        return dy @ self.p["w"].T


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(d))
        self.add_param("beta", np.zeros(d))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return self.p["gamma"] * xhat + self.p["beta"], (xhat, inv)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        xhat, inv = cache
        lead = tuple(range(dy.ndim - 1))
        self.g["gamma"] += (dy * xhat).sum(axis=lead)
        self.g["beta"] += dy.sum(axis=lead)
        dxhat = dy * self.p["gamma"]
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.02) -> None:
        super().__init__()
        self.n = n
        self.add_param("w", rng.normal(0.0, scale, size=(n, d)))

    def forward(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.n):
            raise ValueError(
                f"token id out of range [0, {self.n}): "
                f"min={ids.min()}, max={ids.max()}"
            )
        return self.p["w"][ids], ids

    def backward(self, cache: np.ndarray, dy: np.ndarray) -> None:
        np.add.at(self.g["w"], cache, dy)
        return None


class PositionalEmbedding(Module):
    """Learned additive position table."""

    def __init__(self, max_len: int, d: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.max_len = max_len
        self.add_param("w", rng.normal(0.0, 0.01, size=(max_len, d)))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, int]:
        t = x.shape[-2]
        if t > self.max_len:
            raise ValueError(f"sequence length {t} exceeds the position table ({self.max_len})")
        return x + self.p["w"][:t], t

    def backward(self, cache: int, dy: np.ndarray) -> np.ndarray:
        t = cache
        lead = tuple(range(dy.ndim - 2))
        self.g["w"][:t] += dy.sum(axis=lead) if lead else dy
        return dy


class CausalSelfAttention(Module):
    """Multi-head self-attention over (B, T, d); optionally causal."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, causal: bool) -> None:
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"model dim {d} not divisible by {n_heads} heads")
        self.d, self.h, self.dh = d, n_heads, d // n_heads
        self.causal = causal
        self.add_module("wq", Linear(d, d, rng))
        self.add_module("wk", Linear(d, d, rng))
        self.add_module("wv", Linear(d, d, rng))
        self.add_module("wo", Linear(d, d, rng))

    def _split(self, x: np.ndarray) -> np.ndarray:
        b, t, _ = x.shape
        return x.reshape(b, t, self.h, self.dh).transpose(0, 2, 1, 3)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        b, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        b, t, _ = x.shape
        q_f, cq = self._mods["wq"].forward(x)
        k_f, ck = self._mods["wk"].forward(x)
        v_f, cv = self._mods["wv"].forward(x)
        q, k, v = self._split(q_f), self._split(k_f), self._split(v_f)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.dh)
        if self.causal:
            mask = np.triu(np.full((t, t), -np.inf), k=1)
            scores = scores + mask
        attn = softmax(scores, axis=-1)
        ctx = attn @ v
        out, co = self._mods["wo"].forward(self._merge(ctx))
        return out, (cq, ck, cv, co, q, k, v, attn)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        cq, ck, cv, co, q, k, v, attn = cache
        d_ctx_m = self._mods["wo"].backward(co, dy)
        d_ctx = self._split(d_ctx_m)
        d_attn = d_ctx @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ d_ctx
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_scores = d_scores / np.sqrt(self.dh)
        dq = d_scores @ k
        dk = d_scores.transpose(0, 1, 3, 2) @ q
        dx = self._mods["wq"].backward(cq, self._merge(dq))
        dx = dx + self._mods["wk"].backward(ck, self._merge(dk))
        dx = dx + self._mods["wv"].backward(cv, self._merge(dv))
        return dx


class Mlp(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.add_module("fc1", Linear(d, hidden, rng))
        self.add_module("fc2", Linear(hidden, d, rng))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, c1 = self._mods["fc1"].forward(x)
        a, ca = gelu_forward(h)
        y, c2 = self._mods["fc2"].forward(a)
        return y, (c1, ca, c2)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        c1, ca, c2 = cache
        da = self._mods["fc2"].backward(c2, dy)
        dh = gelu_backward(ca, da)
        return self._mods["fc1"].backward(c1, dh)


class TransformerBlock(Module):
    """Pre-norm block: x + attn(ln1(x)), then + mlp(ln2(.))."""

    def __init__(
        self, d: int, n_heads: int, rng: np.random.Generator, causal: bool, mlp_ratio: int = 2
    ) -> None:
        super().__init__()
        self.add_module("ln1", LayerNorm(d))
        self.add_module("attn", CausalSelfAttention(d, n_heads, rng, causal))
        self.add_module("ln2", LayerNorm(d))
        self.add_module("mlp", Mlp(d, mlp_ratio * d, rng))

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        n1, c1 = self._mods["ln1"].forward(x)
        a, ca = self._mods["attn"].forward(n1)
        h = x + a
        n2, c2 = self._mods["ln2"].forward(h)
        m, cm = self._mods["mlp"].forward(n2)
        return h + m, (c1, ca, c2, cm)

    def backward(self, cache: tuple, dy: np.ndarray) -> np.ndarray:
        c1, ca, c2, cm = cache
        dn2 = self._mods["mlp"].backward(cm, dy)
        dh = dy + self._mods["ln2"].backward(c2, dn2)
        dn1 = self._mods["attn"].backward(ca, dh)
        return dh + self._mods["ln1"].backward(c1, dn1)
