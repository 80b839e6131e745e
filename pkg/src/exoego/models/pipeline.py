"""
The assembled cross-view model: two encoders, two mapping nets, one LM.

Parameter names are namespaced by component ("ego_enc.", "exo_enc.",
"map_f.", "map_g.", "lm.") and stay stable across LoRA wrapping, which the
staged trainer's freeze sets and the checkpoint format rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..jsonio import derive_seed
from ..synthworld import FRAMES_PER_CLIP
from .core import Module
from .encoder import VisualEncoder
from .lm import TinyLM, Vocab
from .lora import LoRAConfig
from .mapping import FcMapping, MappingNet

__all__ = [
    "ModelConfig",
    "PipelineModel",
    "build_model",
    "attach_adapters",
    "concat_guidance",
]


@dataclass(frozen=True)
class ModelConfig:
    ego_in_dim: int
    exo_in_dim: int
    d: int = 32
    enc_blocks: int = 2
    enc_heads: int = 2
    lm_blocks: int = 2
    lm_heads: int = 2
    map_hidden: int | None = None  # None -> d // 2
    map_blocks: int = 9
    map_kind: str = "residual"  # "residual" | "fc" (ablation)
    n_frames: int = FRAMES_PER_CLIP
    max_text_len: int = 48

    @property
    def lm_max_len(self) -> int:
        # mapped prefix + ego prefix + BOS + text budget
        return 2 * self.n_frames + 1 + self.max_text_len

    def to_json(self) -> dict:
        return {
            "ego_in_dim": self.ego_in_dim,
            "exo_in_dim": self.exo_in_dim,
            "d": self.d,
            "enc_blocks": self.enc_blocks,
            "enc_heads": self.enc_heads,
            "lm_blocks": self.lm_blocks,
            "lm_heads": self.lm_heads,
            "map_hidden": self.map_hidden,
            "map_blocks": self.map_blocks,
            "map_kind": self.map_kind,
            "n_frames": self.n_frames,
            "max_text_len": self.max_text_len,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**{k: obj[k] for k in cls.__dataclass_fields__ if k in obj})


def _make_mapping(cfg: ModelConfig, rng: np.random.Generator) -> Module:
    if cfg.map_kind == "residual":
        return MappingNet(cfg.d, rng, hidden=cfg.map_hidden, n_blocks=cfg.map_blocks)
    if cfg.map_kind == "fc":
        return FcMapping(cfg.d, rng, hidden=cfg.map_hidden)
    raise ValueError(f"unknown mapping kind {cfg.map_kind!r}")


class PipelineModel(Module):
    """Container for all trainable components plus the vocabulary."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, seed: int) -> None:
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.seed = seed
        self.lora_cfg: LoRAConfig | None = None  # set when adapters are attached
        self.lora_seed: int = 0

        def rng(tag: str) -> np.random.Generator:
            return np.random.default_rng(derive_seed("model", seed, tag))

        self.add_module(
            "ego_enc",
            VisualEncoder("ego", cfg.ego_in_dim, cfg.d, rng("ego_enc"),
                          n_blocks=cfg.enc_blocks, n_heads=cfg.enc_heads,
                          n_frames=cfg.n_frames),
        )
        self.add_module(
            "exo_enc",
            VisualEncoder("exo", cfg.exo_in_dim, cfg.d, rng("exo_enc"),
                          n_blocks=cfg.enc_blocks, n_heads=cfg.enc_heads,
                          n_frames=cfg.n_frames),
        )
        self.add_module("map_f", _make_mapping(cfg, rng("map_f")))
        self.add_module("map_g", _make_mapping(cfg, rng("map_g")))
        self.add_module(
            "lm",
            TinyLM(len(vocab), cfg.d, rng("lm"), n_blocks=cfg.lm_blocks,
                   n_heads=cfg.lm_heads, max_len=cfg.lm_max_len),
        )

    @property
    def ego_enc(self) -> VisualEncoder:
        return self._mods["ego_enc"]

    @property
    def exo_enc(self) -> VisualEncoder:
        return self._mods["exo_enc"]

    @property
    def map_f(self) -> Module:
        return self._mods["map_f"]

    @property
    def map_g(self) -> Module:
        return self._mods["map_g"]

    @property
    def lm(self) -> TinyLM:
        return self._mods["lm"]


def build_model(cfg: ModelConfig, vocab: Vocab, seed: int = 0) -> PipelineModel:
    model = PipelineModel(cfg, vocab, seed)
    names = list(model.named_parameters())
    if len(names) != len(set(names)):
        raise RuntimeError("parameter names are not unique")  # pragma: no cover
    return model


def attach_adapters(model: PipelineModel, cfg: LoRAConfig, seed: int = 0) -> list[str]:
    """
    Wrap the model's adapter-target layers and record the configuration on the
    model so checkpoints can rebuild the exact same shape.
    """
    from .lora import lora_wrap  # local import: lora builds on core only

    wrapped = lora_wrap(model, cfg, seed=seed)
    model.lora_cfg = cfg
    model.lora_seed = seed
    return wrapped


def concat_guidance(ego_feats: np.ndarray, mapped_feats: np.ndarray) -> np.ndarray:
    """
    Stack guidance features for the LM prefix: mapped (demonstrator-side)
    frames first, then the learner's own ego frames, along the time axis.

    Both inputs must share shape (..., T, d); output is (..., 2T, d).
    """
    ego_feats = np.asarray(ego_feats)
    mapped_feats = np.asarray(mapped_feats)
    if ego_feats.shape != mapped_feats.shape:
        raise ValueError(
            f"guidance shapes differ: ego {ego_feats.shape} vs mapped {mapped_feats.shape}"
        )
    if ego_feats.ndim < 2:
        raise ValueError("guidance features must be at least (T, d)")
    return np.concatenate([mapped_feats, ego_feats], axis=-2)
