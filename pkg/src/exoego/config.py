"""
Run configuration: one serializable object owning every knob of a run.

A run is `(profile, seed, world, model, stage overrides, eval protocol)`.
Profiles bundle the scale knobs: ``paper-default`` keeps the reference batch
sizes and adapter rank, ``toy`` shrinks batches 64x and the adapter to rank 4
so the full pipeline finishes on a laptop CPU in minutes.  Everything here
round-trips through JSON, and ``config_hash`` gives the stable digest that is
stamped into every artifact a run produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from . import jsonio
from .models.lora import LoRAConfig
from .models.pipeline import ModelConfig
from .synthworld import WorldConfig, frame_dims
from .trainer import PAPER_PROFILE, TOY_PROFILE, Profile, get_ablation

__all__ = ["RunConfig", "PROFILES"]

PROFILES = ("paper-default", "toy")

# Scale knobs bundled by profile: dataset size, model width, adapter shape,
# and how many evaluation items to build.
_PROFILE_DEFAULTS = {
    "toy": {
        "n_episodes": 12,
        "model": {"d": 32, "enc_blocks": 2, "enc_heads": 2, "lm_blocks": 2, "lm_heads": 2},
        "lora": {"r": 4, "alpha": 8.0, "dropout": 0.0},
        "eval_items": 40,
    },
    "paper-default": {
        "n_episodes": 64,
        "model": {"d": 128, "enc_blocks": 2, "enc_heads": 4, "lm_blocks": 2, "lm_heads": 4},
        "lora": {"r": 128, "alpha": 256.0, "dropout": 0.1},
        "eval_items": 500,
    },
}

_EVAL_DEFAULTS = {
    "tasks": ["mcq"],
    "n_items": None,  # None -> profile default
    "n_choices": 5,
    "scope": "inter",
    "split": "test",
}


@dataclass
class RunConfig:
    profile: str = "toy"
    seed: int = 0
    output_dir: str = ""  # empty -> resolved from EXOEGO_OUT or ./runs
    mode: str = "gridworld"  # world render mode: gridworld | linear
    world: dict = field(default_factory=dict)  # extra WorldConfig fields
    n_episodes: int | None = None  # None -> profile default
    split_seed: int = 0
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    lora: dict = field(default_factory=dict)  # LoRAConfig overrides
    stage_overrides: dict = field(default_factory=dict)  # per-stage knobs
    ablation: str = "full"
    eval_protocol: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; want one of {PROFILES}")
        if self.mode not in ("gridworld", "linear"):
            raise ValueError(f"unknown world mode {self.mode!r}")
        get_ablation(self.ablation)  # raises on unknown preset
        for stage_id, ov in self.stage_overrides.items():
            if stage_id not in ("init", "s1", "s2", "s3"):
                raise ValueError(f"stage override for unknown stage {stage_id!r}")
            if not isinstance(ov, dict):
                raise ValueError(f"stage override for {stage_id!r} must be a mapping")
        bad = set(self.eval_protocol) - set(_EVAL_DEFAULTS)
        if bad:
            raise ValueError(f"unknown eval protocol key(s): {sorted(bad)}")
        self.world_config().validate()

    # -- derived views -------------------------------------------------------

    def world_config(self) -> WorldConfig:
        fields: dict[str, Any] = {"mode": self.mode, "world_seed": self.seed}
        fields.update(self.world)
        return WorldConfig(**fields)

    def episodes(self) -> int:
        if self.n_episodes is not None:
            return int(self.n_episodes)
        return _PROFILE_DEFAULTS[self.profile]["n_episodes"]

    def trainer_profile(self) -> Profile:
        return PAPER_PROFILE if self.profile == "paper-default" else TOY_PROFILE

    def model_config(self) -> ModelConfig:
        ego_dim, exo_dim = frame_dims(self.world_config())
        fields = dict(_PROFILE_DEFAULTS[self.profile]["model"])
        ab = get_ablation(self.ablation)
        if ab.map_kind is not None:
            fields["map_kind"] = ab.map_kind
        fields.update(self.model)
        return ModelConfig(ego_in_dim=ego_dim, exo_in_dim=exo_dim, **fields)

    def lora_config(self) -> LoRAConfig | None:
        """Adapter shape for this run; None when the preset disables adapters."""
        if not get_ablation(self.ablation).use_lora:
            return None
        fields = dict(_PROFILE_DEFAULTS[self.profile]["lora"])
        fields.update(self.lora)
        return LoRAConfig(**fields)

    def eval_settings(self) -> dict:
        merged = dict(_EVAL_DEFAULTS)
        merged.update(self.eval_protocol)
        if merged["n_items"] is None:
            merged["n_items"] = _PROFILE_DEFAULTS[self.profile]["eval_items"]
        return merged

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "mode": self.mode,
            "world": dict(self.world),
            "n_episodes": self.n_episodes,
            "split_seed": self.split_seed,
            "ratios": [float(r) for r in self.ratios],
            "model": dict(self.model),
            "lora": dict(self.lora),
            "stage_overrides": {k: dict(v) for k, v in self.stage_overrides.items()},
            "ablation": self.ablation,
            "eval_protocol": dict(self.eval_protocol),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        known = {
            "profile", "seed", "output_dir", "mode", "world", "n_episodes",
            "split_seed", "ratios", "model", "lora", "stage_overrides",
            "ablation", "eval_protocol",
        }
        bad = set(obj) - known
        if bad:
            raise ValueError(f"unknown run-config key(s): {sorted(bad)}")
        kwargs = dict(obj)
        if "ratios" in kwargs:
            kwargs["ratios"] = tuple(float(r) for r in kwargs["ratios"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        """Stable digest stamped into every artifact the run produces."""
        return jsonio.canonical_hash(self.to_json())
