"""Desk-scale lab for parallel hidden decoding transformers (PHD, PHD-SWA, PHD-CSWA)."""

from .attnmask import Layout, MaskSpec, SpecError, Variant, build_mask, is_attendable, mask_stats, validate_spec
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .cost import A100, HardwareModel, compare_variants, decode_cost, prefill_cost
from .engine import decode_step, generate, kv_footprint, prefill
from .model import ConfigError, ModelConfig, Weights, forward_full, init_weights, repeat_tokens, train_step

__version__ = "0.1.0"

__all__ = [
    "A100", "CheckpointError", "ConfigError", "HardwareModel", "Layout", "MaskSpec", "ModelConfig",
    "SpecError", "Variant", "Weights", "build_mask", "compare_variants", "decode_cost", "decode_step",
    "forward_full", "generate", "init_weights", "is_attendable", "kv_footprint", "load_checkpoint",
    "mask_stats", "prefill", "prefill_cost", "repeat_tokens", "save_checkpoint", "train_step",
    "validate_spec",
]
