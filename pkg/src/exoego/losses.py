"""
Training objectives: next-token text loss, cycle-consistency, distribution
alignment, and the per-stage weighted combination.

Conventions:

* The text loss is the mean cross-entropy over *unmasked* token positions
  (prefix and padding positions are excluded by the mask).
* The cycle loss treats features as an L1 reconstruction problem in both
  directions: forward ``mean |G(F(x)) - x|`` and backward ``mean |F(G(y)) - y|``,
  each averaged over every element of the batch block.
* The alignment loss is a KL divergence between temperature-softmaxed feature
  vectors, taken per frame over the feature dimension and averaged; direction
  is KL(real-view distribution || mapped-estimate distribution).

Each loss has a value-only form (the public op) and a gradient form used by
the trainer; the gradient forms are finite-difference-checked in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .models.core import log_softmax, softmax

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "vtg_loss",
    "vtg_loss_and_grad",
    "ccl",
    "kl_align",
    "kl_align_and_grads",
    "total_stage_loss",
]


@dataclass(frozen=True)
class LossWeights:
    vtg: float = 1.0
    ccl: float = 1.0
    kl: float = 1.0

    def to_json(self) -> dict:
        return {"vtg": self.vtg, "ccl": self.ccl, "kl": self.kl}


@dataclass
class LossBreakdown:
    """Raw per-component values plus the weighted total for one step."""

    vtg: float = 0.0
    ccl_forward: float = 0.0
    ccl_backward: float = 0.0
    kl: float = 0.0
    total: float = 0.0
    weights: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "vtg": self.vtg,
            "ccl_forward": self.ccl_forward,
            "ccl_backward": self.ccl_backward,
            "kl": self.kl,
            "total": self.total,
            "weights": dict(self.weights),
        }


# ---------------------------------------------------------------------------
# Text loss
# ---------------------------------------------------------------------------


def _check_vtg_inputs(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if logits.ndim < 2:
        raise ValueError(f"logits must be (..., positions, vocab), got {logits.shape}")
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ValueError(
            f"shape mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}"
        )
    v = logits.shape[-1]
    m = mask.astype(bool)
    if m.sum() == 0:
        raise ValueError("all token positions are masked; nothing to score")
    t = targets.astype(np.int64)
    if t[m].min() < 0 or t[m].max() >= v:
        raise ValueError(f"target id outside vocabulary of size {v}")
    return logits, t, m


def vtg_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean next-token cross-entropy over unmasked positions."""
    logits, targets, m = _check_vtg_inputs(logits, targets, mask)
    logp = log_softmax(logits, axis=-1)
    # masked slots may carry arbitrary ids (padding); clip so the gather is safe
    safe = np.clip(targets, 0, logits.shape[-1] - 1)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    return float(-(picked[m]).mean())


def vtg_loss_and_grad(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Loss plus d(loss)/d(logits); masked positions receive zero gradient."""
    logits, targets, m = _check_vtg_inputs(logits, targets, mask)
    logp = log_softmax(logits, axis=-1)
    safe = np.clip(targets, 0, logits.shape[-1] - 1)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    n = m.sum()
    loss = float(-(picked[m]).mean())
    d = softmax(logits, axis=-1)
    onehot_rows = np.zeros_like(d)
    np.put_along_axis(onehot_rows, safe[..., None], 1.0, axis=-1)
    d = (d - onehot_rows) * (m[..., None] / n)
    return loss, d


# ---------------------------------------------------------------------------
# Cycle consistency
# ---------------------------------------------------------------------------


def _apply(fn: Any, x: np.ndarray) -> np.ndarray:
    """Accept either a module (forward returning (y, cache)) or a callable."""
    if hasattr(fn, "forward"):
        return fn.forward(x)[0]
    return fn(x)


def ccl(
    f: Any, g: Any, x_batch: np.ndarray, y_batch: np.ndarray
) -> tuple[float, float]:
    """
    Cycle-consistency values (forward, backward), without gradients.

    forward  = mean |g(f(x)) - x| over the whole x batch block
    backward = mean |f(g(y)) - y| over the whole y batch block
    """
    x = np.asarray(x_batch, dtype=np.float64)
    y = np.asarray(y_batch, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("cycle loss needs non-empty batches for both directions")
    fwd = float(np.abs(_apply(g, _apply(f, x)) - x).mean())
    bwd = float(np.abs(_apply(f, _apply(g, y)) - y).mean())
    return fwd, bwd


# ---------------------------------------------------------------------------
# Distribution alignment
# ---------------------------------------------------------------------------


def _check_kl_inputs(real, est, temperature):
    real = np.asarray(real, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if real.shape != est.shape:
        raise ValueError(f"aligned feature shapes differ: {real.shape} vs {est.shape}")
    if real.ndim < 1 or real.shape[-1] < 2:
        raise ValueError("alignment needs a feature dimension of size >= 2")
    if not (np.all(np.isfinite(real)) and np.all(np.isfinite(est))):
        raise ValueError("alignment inputs contain non-finite values")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return real, est


def kl_align(real: np.ndarray, est: np.ndarray, temperature: float = 1.0) -> float:
    """
    KL(p || q) where p/q are softmax(real/T), softmax(est/T) per frame over the
    feature dimension; the mean is taken over all leading axes.
    """
    real, est = _check_kl_inputs(real, est, temperature)
    logp = log_softmax(real / temperature, axis=-1)
    logq = log_softmax(est / temperature, axis=-1)
    p = np.exp(logp)
    kl = (p * (logp - logq)).sum(axis=-1)
    return float(kl.mean())


def kl_align_and_grads(
    real: np.ndarray, est: np.ndarray, temperature: float = 1.0
) -> tuple[float, np.ndarray, np.ndarray]:
    """Value plus gradients with respect to both inputs' raw features."""
    real, est = _check_kl_inputs(real, est, temperature)
    t = temperature
    logp = log_softmax(real / t, axis=-1)
    logq = log_softmax(est / t, axis=-1)
    p, q = np.exp(logp), np.exp(logq)
    per_frame = (p * (logp - logq)).sum(axis=-1)
    n_frames = per_frame.size
    val = float(per_frame.mean())
    # d/d(est): (q - p) / T per frame
    d_est = (q - p) / (t * n_frames)
    # d/d(real): p * ((logp - logq) - per_frame) / T per frame
    diff = logp - logq
    d_real = p * (diff - per_frame[..., None]) / (t * n_frames)
    return val, d_real, d_est


# ---------------------------------------------------------------------------
# Stage combination
# ---------------------------------------------------------------------------


def total_stage_loss(stage: Any, parts: dict[str, float]) -> LossBreakdown:
    """
    Combine raw component values for a stage.

    ``stage`` provides ``active_losses`` (subset of {"vtg", "ccl", "kl"}),
    ``loss_weights`` and ``ccl_backward`` (whether the backward cycle term is
    included).  Inactive components are reported as zero and excluded.
    """
    active = set(stage.active_losses)
    unknown = active - {"vtg", "ccl", "kl"}
    if unknown:
        raise ValueError(f"unknown loss component(s): {sorted(unknown)}")

    def need(key: str) -> float:
        if key not in parts:
            raise ValueError(f"active loss needs {key!r} but it was not computed")
        return float(parts[key])

    w: LossWeights = stage.loss_weights
    both_cycles = "ccl" in active and getattr(stage, "ccl_backward", True)
    bd = LossBreakdown(
        weights={
            "vtg": w.vtg if "vtg" in active else 0.0,
            "ccl_forward": w.ccl if "ccl" in active else 0.0,
            "ccl_backward": w.ccl if both_cycles else 0.0,
            "kl": w.kl if "kl" in active else 0.0,
        }
    )
    total = 0.0
    if "vtg" in active:
        bd.vtg = need("vtg")
        total += w.vtg * bd.vtg
    if "ccl" in active:
        bd.ccl_forward = need("ccl_forward")
        total += w.ccl * bd.ccl_forward
        if both_cycles:
            bd.ccl_backward = need("ccl_backward")
            total += w.ccl * bd.ccl_backward
    if "kl" in active:
        bd.kl = need("kl")
        total += w.kl * bd.kl
    bd.total = float(total)
    return bd
