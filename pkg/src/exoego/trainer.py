"""
Staged training: four phases with explicit freeze contracts.

The schedule has four phases over one shared model:

* ``init`` — both visual encoders learn captioning (each view separately);
  the LM and both mapping nets stay frozen.
* ``s1``   — demonstrator preparation: only the exo encoder trains, on
  exo-view captioning.
* ``s2``   — guidance: the ego encoder and both mapping nets train with the
  text loss (prefix = [F(x); x]), the bidirectional cycle loss, and the
  KL alignment of F(x) against the frozen exo encoder's features.
* ``s3``   — practice: instruction tuning with LoRA adapters on the LM,
  alongside the ego encoder and F; everything else is frozen.

"Frozen" is literal: parameters matched by a stage's frozen patterns must be
bit-identical before and after the stage, enforced with content digests.
Trainable patterns win when both lists match a name; the same literal pattern
appearing in both lists is a configuration error, as is a name covered by
neither.

The optimizer is AdamW (decoupled weight decay) with bias correction and
global-norm gradient clipping; the learning rate warms up linearly and then
follows a half-cosine to zero.  Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from pathlib import Path

import numpy as np

from . import jsonio
from .arrays import array_digest, load_array, save_array
from .losses import (
    LossBreakdown,
    LossWeights,
    kl_align_and_grads,
    total_stage_loss,
    vtg_loss_and_grad,
)
from .models.encoder import encode_batch
from .models.lm import BOS, PAD, Vocab
from .models.lora import LoRAConfig
from .models.pipeline import (
    ModelConfig,
    PipelineModel,
    attach_adapters,
    concat_guidance,
)

__all__ = [
    "STAGES",
    "Profile",
    "PAPER_PROFILE",
    "TOY_PROFILE",
    "StageConfig",
    "Ablation",
    "ABLATIONS",
    "stage_plan",
    "resolve_freeze",
    "freeze_digests",
    "lr_at",
    "OptState",
    "opt_init",
    "opt_step",
    "clip_grad_norm",
    "CaptionSample",
    "PairSample",
    "InstructionSample",
    "TrainReport",
    "run_stage",
    "checkpoint_save",
    "checkpoint_load",
    "check_lineage",
    "param_digests",
    "DivergenceError",
    "CheckpointError",
    "LineageError",
]

STAGES = ("init", "s1", "s2", "s3")

CHECKPOINT_SCHEMA = "exo2ego-checkpoint/1"

# Prerequisite chain: a stage may only run once these stages are in the
# checkpoint lineage (unless explicitly skipped, which is recorded).
_PREREQ = {
    "init": (),
    "s1": ("init",),
    "s2": ("init", "s1"),
    "s3": ("init", "s1", "s2"),
}


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; the last good checkpoint is retained."""


class CheckpointError(RuntimeError):
    """A checkpoint directory is incomplete or fails its content hashes."""


class LineageError(ValueError):
    """A stage was requested before its prerequisite stages have run."""


# ---------------------------------------------------------------------------
# Profiles and stage plans
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Profile:
    """Scale knob between reference-scale and desk-scale runs.

    Only the global batch size is scaled; epoch counts and learning-rate
    schedule shape are kept, so the desk-scale run traverses the same
    schedule with proportionally fewer samples per step.
    """

    name: str
    batch_scale: float = 1.0

    def effective_batch(self, reference_batch: int) -> int:
        return max(1, int(round(reference_batch * self.batch_scale)))


PAPER_PROFILE = Profile("paper-default", 1.0)
TOY_PROFILE = Profile("toy", 1.0 / 64.0)


@dataclass(frozen=True)
class StageConfig:
    stage_id: str
    trainable: tuple[str, ...]  # parameter-name patterns (fnmatch), win ties
    frozen: tuple[str, ...]  # parameter-name patterns
    active_losses: tuple[str, ...]
    lr: float
    warmup_ratio: float
    epochs: int
    reference_batch: int  # global batch before profile scaling
    batch_size: int  # effective per-step batch after scaling
    loss_weights: LossWeights = LossWeights()
    ccl_backward: bool = True  # include the backward cycle term
    kl_temperature: float = 1.0
    grad_clip: float = 1.0  # global-norm ceiling
    weight_decay: float = 0.02
    seed: int = 0
    dataset_ref: str = ""
    profile: str = "toy"
    ablation: str = "full"

    def validate(self) -> None:
        if self.stage_id not in STAGES:
            raise ValueError(f"unknown stage {self.stage_id!r}; expected one of {STAGES}")
        overlap = sorted(set(self.trainable) & set(self.frozen))
        if overlap:
            raise ValueError(
                f"pattern(s) listed as both trainable and frozen: {overlap}"
            )
        if not self.trainable:
            raise ValueError("a stage must have at least one trainable pattern")
        unknown = set(self.active_losses) - {"vtg", "ccl", "kl"}
        if unknown:
            raise ValueError(f"unknown loss component(s): {sorted(unknown)}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.reference_batch < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if not self.kl_temperature > 0:
            raise ValueError("kl_temperature must be positive")

    def to_json(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "trainable": list(self.trainable),
            "frozen": list(self.frozen),
            "active_losses": list(self.active_losses),
            "loss_weights": self.loss_weights.to_json(),
            "ccl_backward": self.ccl_backward,
            "lr": self.lr,
            "warmup_ratio": self.warmup_ratio,
            "epochs": self.epochs,
            "reference_batch": self.reference_batch,
            "batch_size": self.batch_size,
            "kl_temperature": self.kl_temperature,
            "grad_clip": self.grad_clip,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "dataset_ref": self.dataset_ref,
            "profile": self.profile,
            "ablation": self.ablation,
        }


# Reference hyperparameters per stage: lr / warmup / epochs / global batch,
# plus the freeze partition and which losses are on.
_STAGE_DEFAULTS: dict[str, dict] = {
    "init": dict(
        lr=1e-3,
        warmup_ratio=0.1,
        epochs=5,
        reference_batch=512,
        active_losses=("vtg",),
        trainable=("ego_enc.*", "exo_enc.*"),
        frozen=("lm.*", "map_f.*", "map_g.*"),
    ),
    "s1": dict(
        lr=1e-4,
        warmup_ratio=0.03,
        epochs=2,
        reference_batch=256,
        active_losses=("vtg",),
        trainable=("exo_enc.*",),
        frozen=("ego_enc.*", "lm.*", "map_f.*", "map_g.*"),
    ),
    "s2": dict(
        lr=1e-4,
        warmup_ratio=0.03,
        epochs=2,
        reference_batch=256,
        active_losses=("vtg", "ccl", "kl"),
        trainable=("ego_enc.*", "map_f.*", "map_g.*"),
        frozen=("exo_enc.*", "lm.*"),
    ),
    "s3": dict(
        lr=2e-5,
        warmup_ratio=0.03,
        epochs=1,
        reference_batch=64,
        active_losses=("vtg",),
        trainable=("ego_enc.*", "map_f.*", "lm.*.lora_a", "lm.*.lora_b"),
        frozen=("exo_enc.*", "map_g.*", "lm.*"),
    ),
}


@dataclass(frozen=True)
class Ablation:
    """A named variant of the pipeline: loss toggles, freeze edits, model swaps."""

    name: str
    note: str
    map_kind: str | None = None  # "fc" swaps the mapping nets; None keeps default
    use_lora: bool = True  # whether s3 attaches adapters
    stage_overrides: dict[str, dict] = field(default_factory=dict)


ABLATIONS: dict[str, Ablation] = {
    "full": Ablation("full", "reference configuration"),
    "no-lora": Ablation(
        "no-lora",
        "s3 tunes only the ego encoder and F; the LM gets no adapters",
        use_lora=False,
        stage_overrides={
            "s3": dict(
                trainable=("ego_enc.*", "map_f.*"),
                frozen=("exo_enc.*", "map_g.*", "lm.*"),
            )
        },
    ),
    "fwd-only-ccl": Ablation(
        "fwd-only-ccl",
        "cycle loss keeps only the forward direction",
        stage_overrides={"s2": dict(ccl_backward=False)},
    ),
    "no-ccl": Ablation(
        "no-ccl",
        "drops the cycle loss and the inverse map G entirely",
        stage_overrides={
            "s2": dict(
                active_losses=("vtg", "kl"),
                trainable=("ego_enc.*", "map_f.*"),
                frozen=("exo_enc.*", "map_g.*", "lm.*"),
            )
        },
    ),
    "no-kl": Ablation(
        "no-kl",
        "drops the feature-distribution alignment term",
        stage_overrides={"s2": dict(active_losses=("vtg", "ccl"))},
    ),
    "fc-mapping": Ablation(
        "fc-mapping",
        "replaces both residual mapping nets with two-layer fully connected nets",
        map_kind="fc",
    ),
    "exo-trainable": Ablation(
        "exo-trainable",
        "unfreezes the exo encoder during s2 (mutual-learning variant)",
        stage_overrides={
            "s2": dict(
                trainable=("ego_enc.*", "exo_enc.*", "map_f.*", "map_g.*"),
                frozen=("lm.*",),
            )
        },
    ),
    "frozen-ego-s3": Ablation(
        "frozen-ego-s3",
        "keeps the ego encoder frozen during s3 (adapters + F only)",
        stage_overrides={
            "s3": dict(
                trainable=("map_f.*", "lm.*.lora_a", "lm.*.lora_b"),
                frozen=("ego_enc.*", "exo_enc.*", "map_g.*", "lm.*"),
            )
        },
    ),
}


def get_ablation(name: str) -> Ablation:
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown ablation {name!r}; valid presets: {sorted(ABLATIONS)}"
        ) from None


def stage_plan(
    stage_id: str,
    *,
    profile: Profile = TOY_PROFILE,
    ablation: str = "full",
    seed: int = 0,
    dataset_ref: str = "",
    overrides: dict | None = None,
) -> StageConfig:
    """Assemble a StageConfig from stage defaults + ablation + overrides."""
    if stage_id not in STAGES:
        raise ValueError(f"unknown stage {stage_id!r}; expected one of {STAGES}")
    preset = get_ablation(ablation)
    fields = dict(_STAGE_DEFAULTS[stage_id])
    fields.update(preset.stage_overrides.get(stage_id, {}))
    cfg = StageConfig(
        stage_id=stage_id,
        seed=seed,
        dataset_ref=dataset_ref,
        profile=profile.name,
        ablation=ablation,
        batch_size=profile.effective_batch(fields["reference_batch"]),
        **fields,
    )
    if overrides:
        bad = set(overrides) - set(StageConfig.__dataclass_fields__)
        if bad:
            raise ValueError(f"unknown stage-config override(s): {sorted(bad)}")
        overrides = dict(overrides)
        lw = overrides.get("loss_weights")
        if isinstance(lw, dict):
            overrides["loss_weights"] = LossWeights(**lw)
        for key in ("active_losses", "trainable", "frozen"):
            if isinstance(overrides.get(key), list):
                overrides[key] = tuple(overrides[key])
        cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Freeze resolution
# ---------------------------------------------------------------------------


def resolve_freeze(
    cfg: StageConfig, param_names
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """
    Partition parameter names into (trainable, frozen).

    A name matching any trainable pattern is trainable (trainable wins over
    frozen at the name level); otherwise it must match a frozen pattern.  A
    name matching neither is an error — the partition must be exhaustive.
    """
    overlap = sorted(set(cfg.trainable) & set(cfg.frozen))
    if overlap:
        raise ValueError(f"pattern(s) listed as both trainable and frozen: {overlap}")
    trainable: list[str] = []
    frozen: list[str] = []
    for name in sorted(param_names):
        if any(fnmatchcase(name, pat) for pat in cfg.trainable):
            trainable.append(name)
        elif any(fnmatchcase(name, pat) for pat in cfg.frozen):
            frozen.append(name)
        else:
            raise ValueError(
                f"parameter {name!r} is covered by neither trainable nor frozen "
                f"patterns of stage {cfg.stage_id!r}"
            )
    return tuple(trainable), tuple(frozen)


def freeze_digests(params: dict[str, np.ndarray], names) -> dict[str, str]:
    """Content digest per parameter name (bit-level freeze evidence)."""
    return {name: array_digest(params[name]) for name in names}


def param_digests(model: PipelineModel) -> dict[str, str]:
    params = model.named_parameters()
    return {name: array_digest(params[name]) for name in sorted(params)}


# ---------------------------------------------------------------------------
# Optimizer + schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, total_steps: int, cfg: StageConfig) -> float:
    """Linear warmup to the peak rate, then half-cosine decay to zero."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_ratio * total_steps
    if step < warm:
        return cfg.lr * step / warm
    denom = max(total_steps - warm, 1e-12)
    progress = (step - warm) / denom
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class OptState:
    """AdamW state; moments exist only for trainable parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02


def opt_init(
    params: dict[str, np.ndarray],
    trainable_names,
    weight_decay: float = 0.02,
) -> OptState:
    m = {n: np.zeros_like(params[n]) for n in trainable_names}
    v = {n: np.zeros_like(params[n]) for n in trainable_names}
    return OptState(m=m, v=v, weight_decay=weight_decay)


def clip_grad_norm(
    grads: dict[str, np.ndarray], names, max_norm: float
) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm."""
    sq = 0.0
    for n in names:
        g = grads[n]
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for n in names:
            grads[n] *= scale
    return norm


def opt_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float,
) -> None:
    """One decoupled-weight-decay Adam update over the moment-tracked names."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name in sorted(state.m):
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p = params[name]
        p -= lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)


# ---------------------------------------------------------------------------
# Stage data
# ---------------------------------------------------------------------------


@dataclass
class CaptionSample:
    """Single-view captioning example (init and s1)."""

    view: str  # "ego" | "exo" — selects the encoder
    frames: np.ndarray  # (n_frames, in_dim) flattened frames
    token_ids: list[int]  # target text including the end token


@dataclass
class PairSample:
    """Synchronized two-view example with shared narration (s2)."""

    ego_frames: np.ndarray  # (n_frames, ego_in_dim)
    exo_frames: np.ndarray  # (n_frames, exo_in_dim)
    token_ids: list[int]


@dataclass
class InstructionSample:
    """Ego-only instruction example (s3): prompt is context, answer is supervised."""

    ego_frames: np.ndarray
    prompt_ids: list[int]  # conditioning tokens, excluded from the loss
    answer_ids: list[int]  # supervised tokens including the end token


def _pack_tokens(
    token_lists: list[list[int]], prompt_lens: list[int] | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Build padded (in_ids, targets, mask) for teacher forcing.

    Each row's input is [BOS] + tokens[:-1]; its targets are the tokens
    themselves.  Padding positions are masked out, and optionally the first
    ``prompt_lens[b]`` target positions (the prompt) are masked too.
    """
    if not token_lists:
        raise ValueError("empty batch")
    for toks in token_lists:
        if len(toks) < 1:
            raise ValueError("every sample needs at least one target token")
    b = len(token_lists)
    t = max(len(toks) for toks in token_lists)
    in_ids = np.full((b, t), PAD, dtype=np.int64)
    targets = np.full((b, t), PAD, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i, toks in enumerate(token_lists):
        n = len(toks)
        in_ids[i, 0] = BOS
        if n > 1:
            in_ids[i, 1:n] = toks[:-1]
        targets[i, :n] = toks
        mask[i, :n] = True
        if prompt_lens is not None:
            mask[i, : prompt_lens[i]] = False
    if not mask.any():
        raise ValueError("no supervised positions after masking")
    return in_ids, targets, mask


# ---------------------------------------------------------------------------
# Per-stage forward/backward
# ---------------------------------------------------------------------------


def _caption_step(
    model: PipelineModel, batch: list[CaptionSample], cfg: StageConfig
) -> dict[str, float]:
    """VTG over single-view captioning; groups the batch by view."""
    w = cfg.loss_weights
    groups: dict[str, list[CaptionSample]] = {}
    for s in batch:
        groups.setdefault(s.view, []).append(s)
    if cfg.stage_id == "s1" and set(groups) != {"exo"}:
        raise ValueError("s1 trains on exo-view captions only")
    # Exact mean over all supervised positions across view groups: compute
    # per-group losses/grads, then reweight by each group's position count.
    staged = []
    total_positions = 0
    for view, samples in sorted(groups.items()):
        enc = model.ego_enc if view == "ego" else model.exo_enc
        frames = np.stack([s.frames for s in samples])
        feats, enc_cache = encode_batch(enc, frames)
        in_ids, targets, mask = _pack_tokens([s.token_ids for s in samples])
        logits, lm_cache = model.lm.forward(feats, in_ids)
        loss, dlogits = vtg_loss_and_grad(logits, targets, mask)
        n = int(mask.sum())
        staged.append((enc, enc_cache, lm_cache, loss, dlogits, n))
        total_positions += n
    vtg_total = 0.0
    for enc, enc_cache, lm_cache, loss, dlogits, n in staged:
        share = n / total_positions
        vtg_total += loss * share
        dprefix = model.lm.backward(lm_cache, w.vtg * share * dlogits)
        enc.backward(enc_cache, dprefix)
    return {"vtg": vtg_total}


def _pair_step(
    model: PipelineModel, batch: list[PairSample], cfg: StageConfig, exo_trainable: bool
) -> dict[str, float]:
    """Guidance-stage step: VTG on [F(x); x], cycle losses, KL alignment."""
    w = cfg.loss_weights
    active = set(cfg.active_losses)
    ego_frames = np.stack([s.ego_frames for s in batch])
    exo_frames = np.stack([s.exo_frames for s in batch])
    x_feats, ego_cache = encode_batch(model.ego_enc, ego_frames)
    y_feats, exo_cache = encode_batch(model.exo_enc, exo_frames)
    mapped, f_cache = model.map_f.forward(x_feats)

    parts: dict[str, float] = {}
    d_mapped = np.zeros_like(mapped)
    d_x = np.zeros_like(x_feats)
    d_y = np.zeros_like(y_feats)

    if "vtg" in active:
        prefix = concat_guidance(x_feats, mapped)
        in_ids, targets, mask = _pack_tokens([s.token_ids for s in batch])
        logits, lm_cache = model.lm.forward(prefix, in_ids)
        loss, dlogits = vtg_loss_and_grad(logits, targets, mask)
        parts["vtg"] = loss
        dprefix = model.lm.backward(lm_cache, w.vtg * dlogits)
        t = mapped.shape[1]
        d_mapped += dprefix[:, :t, :]
        d_x += dprefix[:, t:, :]

    if "ccl" in active:
        # forward cycle: G(F(x)) ~ x
        gfx, g_cache_f = model.map_g.forward(mapped)
        diff_f = gfx - x_feats
        parts["ccl_forward"] = float(np.abs(diff_f).mean())
        d_gfx = w.ccl * np.sign(diff_f) / diff_f.size
        d_mapped += model.map_g.backward(g_cache_f, d_gfx)
        d_x -= d_gfx
        if cfg.ccl_backward:
            # backward cycle: F(G(y)) ~ y
            gy, g_cache_b = model.map_g.forward(y_feats)
            fgy, f_cache_b = model.map_f.forward(gy)
            diff_b = fgy - y_feats
            parts["ccl_backward"] = float(np.abs(diff_b).mean())
            d_fgy = w.ccl * np.sign(diff_b) / diff_b.size
            d_gy = model.map_f.backward(f_cache_b, d_fgy)
            d_y += model.map_g.backward(g_cache_b, d_gy)
            d_y -= d_fgy
        else:
            parts["ccl_backward"] = 0.0

    if "kl" in active:
        kl_val, d_real, d_est = kl_align_and_grads(
            y_feats, mapped, cfg.kl_temperature
        )
        parts["kl"] = kl_val
        d_mapped += w.kl * d_est
        d_y += w.kl * d_real

    d_x += model.map_f.backward(f_cache, d_mapped)
    model.ego_enc.backward(ego_cache, d_x)
    if exo_trainable:
        model.exo_enc.backward(exo_cache, d_y)
    return parts


def _instruction_step(
    model: PipelineModel, batch: list[InstructionSample], cfg: StageConfig
) -> dict[str, float]:
    """Practice-stage step: VTG on answers given [F(x); x] plus the prompt."""
    w = cfg.loss_weights
    ego_frames = np.stack([s.ego_frames for s in batch])
    x_feats, ego_cache = encode_batch(model.ego_enc, ego_frames)
    mapped, f_cache = model.map_f.forward(x_feats)
    prefix = concat_guidance(x_feats, mapped)
    token_lists = [list(s.prompt_ids) + list(s.answer_ids) for s in batch]
    prompt_lens = [len(s.prompt_ids) for s in batch]
    in_ids, targets, mask = _pack_tokens(token_lists, prompt_lens)
    logits, lm_cache = model.lm.forward(prefix, in_ids)
    loss, dlogits = vtg_loss_and_grad(logits, targets, mask)
    dprefix = model.lm.backward(lm_cache, w.vtg * dlogits)
    t = mapped.shape[1]
    d_x = model.map_f.backward(f_cache, dprefix[:, :t, :]) + dprefix[:, t:, :]
    model.ego_enc.backward(ego_cache, d_x)
    return {"vtg": loss}


_SAMPLE_KIND = {
    "init": CaptionSample,
    "s1": CaptionSample,
    "s2": PairSample,
    "s3": InstructionSample,
}


# ---------------------------------------------------------------------------
# The stage loop
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    stage_id: str
    steps: int
    epochs: int
    wall_time_s: float
    loss_curve: dict[str, list[float]]  # per-component value per step
    grad_norms: list[float]
    frozen_digest_before: dict[str, str]
    frozen_digest_after: dict[str, str]
    frozen_ok: bool
    final_snapshot: dict
    checkpoint_path: str | None = None
    log_path: str | None = None

    def to_json(self) -> dict:
        return {
            "stage_id": self.stage_id,
            "steps": self.steps,
            "epochs": self.epochs,
            "wall_time_s": self.wall_time_s,
            "loss_curve": {k: list(v) for k, v in self.loss_curve.items()},
            "grad_norms": list(self.grad_norms),
            "frozen_ok": self.frozen_ok,
            "final_snapshot": dict(self.final_snapshot),
            "checkpoint_path": self.checkpoint_path,
            "log_path": self.log_path,
        }


def decile_means(values: list[float]) -> tuple[float, float]:
    """Mean of the leading and trailing 10% of a sequence (at least one step)."""
    if not values:
        raise ValueError("empty sequence")
    k = max(1, len(values) // 10)
    return float(np.mean(values[:k])), float(np.mean(values[-k:]))


def _log_line(handle, payload: dict) -> None:
    if handle is not None:
        handle.write(json.dumps(payload, ensure_ascii=False) + "\n")
        handle.flush()


def run_stage(
    model: PipelineModel,
    cfg: StageConfig,
    data: list,
    *,
    log_path: str | Path | None = None,
    ckpt_dir: str | Path | None = None,
    lineage: tuple[str, ...] = (),
    allow_skip: bool = False,
    config_hash: str = "",
) -> TrainReport:
    """
    Train one stage over ``data``; returns the report.

    Writes a newline-delimited JSON log per step (if ``log_path``) and a
    checkpoint at each epoch end (if ``ckpt_dir``).  On a non-finite loss the
    stage aborts with DivergenceError, leaving the last epoch checkpoint in
    place.  The freeze contract is verified by content digest and violating it
    is a hard error.
    """
    cfg.validate()
    if not data:
        raise ValueError("no training samples")
    kind = _SAMPLE_KIND[cfg.stage_id]
    for s in data:
        if not isinstance(s, kind):
            raise TypeError(
                f"stage {cfg.stage_id!r} expects {kind.__name__} samples, "
                f"got {type(s).__name__}"
            )
    if any("lora" in pat for pat in cfg.trainable) and model.lora_cfg is None:
        raise ValueError(
            f"stage {cfg.stage_id!r} trains adapter parameters but the model has "
            "none attached; call attach_adapters first (or use the no-lora ablation)"
        )
    skipped = check_lineage(cfg.stage_id, lineage, allow_skip=allow_skip)

    params = model.named_parameters()
    trainable_names, frozen_names = resolve_freeze(cfg, params)
    digests_before = freeze_digests(params, frozen_names)

    opt = opt_init(params, trainable_names, weight_decay=cfg.weight_decay)
    steps_per_epoch = (len(data) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    exo_in_train = any(n.startswith("exo_enc.") for n in trainable_names)

    curve: dict[str, list[float]] = {
        "vtg": [], "ccl_forward": [], "ccl_backward": [], "kl": [], "total": []
    }
    grad_norms: list[float] = []
    handle = open(log_path, "w", encoding="utf-8") if log_path else None
    ckpt_path = Path(ckpt_dir) if ckpt_dir else None
    started = time.perf_counter()
    step = 0

    model.set_training(True)
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(
                jsonio.derive_seed("train", cfg.stage_id, cfg.seed, epoch)
            ).permutation(len(data))
            for lo in range(0, len(data), cfg.batch_size):
                batch = [data[i] for i in order[lo : lo + cfg.batch_size]]
                model.zero_grads()
                if cfg.stage_id in ("init", "s1"):
                    parts = _caption_step(model, batch, cfg)
                elif cfg.stage_id == "s2":
                    parts = _pair_step(model, batch, cfg, exo_in_train)
                else:
                    parts = _instruction_step(model, batch, cfg)
                breakdown = total_stage_loss(cfg, parts)
                if not np.isfinite(breakdown.total):
                    raise DivergenceError(
                        f"non-finite loss at stage {cfg.stage_id!r} step {step}; "
                        "last good checkpoint retained"
                    )
                grads = model.named_grads()
                norm = clip_grad_norm(grads, trainable_names, cfg.grad_clip)
                lr = lr_at(step, total_steps, cfg)
                opt_step(params, grads, opt, lr)
                for key in ("vtg", "ccl_forward", "ccl_backward", "kl", "total"):
                    curve[key].append(getattr(breakdown, key))
                grad_norms.append(norm)
                _log_line(
                    handle,
                    {
                        "stage": cfg.stage_id,
                        "step": step,
                        "epoch": epoch,
                        "lr": lr,
                        "grad_norm": norm,
                        "vtg": breakdown.vtg,
                        "ccl_forward": breakdown.ccl_forward,
                        "ccl_backward": breakdown.ccl_backward,
                        "kl": breakdown.kl,
                        "total": breakdown.total,
                        "weights": breakdown.weights,
                    },
                )
                step += 1
            if ckpt_path is not None:
                checkpoint_save(
                    model,
                    ckpt_path,
                    stage=cfg.stage_id,
                    lineage=tuple(lineage) + (cfg.stage_id,),
                    step=step,
                    seed=cfg.seed,
                    config_hash=config_hash,
                    opt_state=opt,
                    skipped=skipped,
                )
    finally:
        model.set_training(False)
        if handle is not None:
            handle.close()

    digests_after = freeze_digests(params, frozen_names)
    frozen_ok = digests_before == digests_after
    if not frozen_ok:
        changed = sorted(
            n for n in digests_before if digests_before[n] != digests_after[n]
        )
        raise RuntimeError(
            f"freeze contract violated in stage {cfg.stage_id!r}: "
            f"parameter(s) changed: {changed[:5]}"
        )

    lead, trail = decile_means(curve["total"])
    report = TrainReport(
        stage_id=cfg.stage_id,
        steps=step,
        epochs=cfg.epochs,
        wall_time_s=time.perf_counter() - started,
        loss_curve=curve,
        grad_norms=grad_norms,
        frozen_digest_before=digests_before,
        frozen_digest_after=digests_after,
        frozen_ok=frozen_ok,
        final_snapshot={
            "leading_decile_total": lead,
            "trailing_decile_total": trail,
            "final_total": curve["total"][-1],
            "final_vtg": curve["vtg"][-1],
            "final_ccl_forward": curve["ccl_forward"][-1],
            "final_ccl_backward": curve["ccl_backward"][-1],
            "final_kl": curve["kl"][-1],
        },
        checkpoint_path=str(ckpt_path) if ckpt_path else None,
        log_path=str(log_path) if log_path else None,
    )
    return report


# ---------------------------------------------------------------------------
# Lineage + checkpoints
# ---------------------------------------------------------------------------


def check_lineage(
    stage_id: str, lineage, allow_skip: bool = False
) -> tuple[str, ...]:
    """
    Verify prerequisite stages have run; returns the skipped ones.

    With ``allow_skip`` the missing prerequisites are returned (to be recorded
    in the checkpoint manifest) instead of raising.
    """
    if stage_id not in STAGES:
        raise ValueError(f"unknown stage {stage_id!r}")
    missing = tuple(s for s in _PREREQ[stage_id] if s not in lineage)
    if missing and not allow_skip:
        raise LineageError(
            f"stage {stage_id!r} requires stage {missing[0]!r} to have run "
            f"(lineage so far: {list(lineage)})"
        )
    return missing


def checkpoint_save(
    model: PipelineModel,
    path: str | Path,
    *,
    stage: str,
    lineage,
    step: int,
    seed: int,
    config_hash: str = "",
    opt_state: OptState | None = None,
    skipped=(),
) -> dict:
    """
    Write the model (and optionally optimizer moments) under ``path``.

    Layout: one binary array per named parameter under params/, optimizer
    moments under opt/, and a manifest with content digests for every array.
    No wall-clock data is written, so identical states produce identical bytes.
    """
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    digests = {}
    for name in sorted(params):
        save_array(path / "params" / name, params[name])
        digests[name] = array_digest(params[name])
    opt_entry = None
    if opt_state is not None:
        for part in ("m", "v"):
            (path / "opt" / part).mkdir(parents=True, exist_ok=True)
        moment_digests = {"m": {}, "v": {}}
        for name in sorted(opt_state.m):
            save_array(path / "opt" / "m" / name, opt_state.m[name])
            save_array(path / "opt" / "v" / name, opt_state.v[name])
            moment_digests["m"][name] = array_digest(opt_state.m[name])
            moment_digests["v"][name] = array_digest(opt_state.v[name])
        opt_entry = {
            "t": opt_state.t,
            "beta1": opt_state.beta1,
            "beta2": opt_state.beta2,
            "eps": opt_state.eps,
            "weight_decay": opt_state.weight_decay,
            "moments": moment_digests,
        }
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "stage": stage,
        "lineage": list(lineage),
        "skipped": list(skipped),
        "step": int(step),
        "seed": int(seed),
        "config_hash": config_hash,
        "model_seed": int(model.seed),
        "model_config": model.cfg.to_json(),
        "vocab": list(model.vocab.tokens),
        "lora": model.lora_cfg.to_json() if model.lora_cfg else None,
        "lora_seed": int(model.lora_seed),
        "params": digests,
        "opt": opt_entry,
    }
    jsonio.dump(manifest, path / "manifest.json")
    return manifest


def checkpoint_load(
    path: str | Path,
) -> tuple[PipelineModel, dict, OptState | None]:
    """
    Rebuild the model from a checkpoint directory, verifying content hashes.

    Returns (model, manifest, optimizer state or None).
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    manifest = jsonio.load(manifest_path)
    if manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"unsupported checkpoint schema {manifest.get('schema')!r}"
        )
    cfg = ModelConfig.from_json(manifest["model_config"])
    vocab = Vocab(tuple(manifest["vocab"]))
    model = PipelineModel(cfg, vocab, seed=int(manifest["model_seed"]))
    if manifest.get("lora"):
        attach_adapters(
            model,
            LoRAConfig.from_json(manifest["lora"]),
            seed=int(manifest.get("lora_seed", 0)),
        )
    params = model.named_parameters()
    recorded = manifest["params"]
    missing = sorted(set(recorded) - set(params))
    extra = sorted(set(params) - set(recorded))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint parameter set mismatch (missing from model: {missing[:3]}, "
            f"absent from manifest: {extra[:3]})"
        )
    for name in sorted(params):
        base = path / "params" / name
        if not Path(str(base) + ".bin").exists():
            raise CheckpointError(f"missing parameter file: {name}")
        arr, _ = load_array(base)
        if array_digest(arr) != recorded[name]:
            raise CheckpointError(f"corrupt checkpoint: hash mismatch for {name!r}")
        if arr.shape != params[name].shape:
            raise CheckpointError(
                f"corrupt checkpoint: shape mismatch for {name!r} "
                f"({arr.shape} vs {params[name].shape})"
            )
        params[name][...] = arr
    opt_state = None
    entry = manifest.get("opt")
    if entry:
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for name, digest in entry["moments"]["m"].items():
            arr, _ = load_array(path / "opt" / "m" / name)
            if array_digest(arr) != digest:
                raise CheckpointError(
                    f"corrupt checkpoint: moment hash mismatch for {name!r}"
                )
            m[name] = arr
        for name, digest in entry["moments"]["v"].items():
            arr, _ = load_array(path / "opt" / "v" / name)
            if array_digest(arr) != digest:
                raise CheckpointError(
                    f"corrupt checkpoint: moment hash mismatch for {name!r}"
                )
            v[name] = arr
        opt_state = OptState(
            m=m,
            v=v,
            t=int(entry["t"]),
            beta1=float(entry["beta1"]),
            beta2=float(entry["beta2"]),
            eps=float(entry["eps"]),
            weight_decay=float(entry["weight_decay"]),
        )
    return model, manifest, opt_state
