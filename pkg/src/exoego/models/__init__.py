"""Model components: numpy layers, encoders, mapping nets, the tiny LM, adapters."""

from .core import (
    CausalSelfAttention,
    Embedding,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    PositionalEmbedding,
    TransformerBlock,
    log_softmax,
    softmax,
)
from .encoder import VisualEncoder, encode, encode_batch
from .lm import TinyLM, Vocab, lm_logits
from .lora import (
    DEFAULT_LORA_TARGETS,
    PAPER_LORA,
    TOY_LORA,
    LoRAConfig,
    LoRALinear,
    lora_merge,
    lora_param_count,
    lora_wrap,
)
from .mapping import FcMapping, MappingNet, ResidualAffineBlock, map_apply, map_apply_with_cache
from .pipeline import (
    ModelConfig,
    PipelineModel,
    attach_adapters,
    build_model,
    concat_guidance,
)

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "Embedding",
    "PositionalEmbedding",
    "CausalSelfAttention",
    "Mlp",
    "TransformerBlock",
    "softmax",
    "log_softmax",
    "VisualEncoder",
    "encode",
    "encode_batch",
    "Vocab",
    "TinyLM",
    "lm_logits",
    "LoRAConfig",
    "LoRALinear",
    "lora_wrap",
    "lora_merge",
    "lora_param_count",
    "PAPER_LORA",
    "TOY_LORA",
    "DEFAULT_LORA_TARGETS",
    "MappingNet",
    "FcMapping",
    "ResidualAffineBlock",
    "map_apply",
    "map_apply_with_cache",
    "ModelConfig",
    "PipelineModel",
    "build_model",
    "attach_adapters",
    "concat_guidance",
]
