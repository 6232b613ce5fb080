"""Slot-level plan-and-infill generation with a small causal transformer."""

from .backbone import KVCache, ModelConfig, TokenBuffer, Transformer, build_model, forward
from .decoder import DecodeConfig, DecodeTrace, PRESETS, decode, greedy_ar_decode
from .objective import arm_loss, hybrid_loss, mdm_loss
from .probe import dependency_probe, js_divergence
from .slotting import corrupt, count_masking_patterns, enumerate_patterns, partition, restore_order
from .training import RunConfig, toy_run, train

__all__ = [
    "KVCache",
    "ModelConfig",
    "TokenBuffer",
    "Transformer",
    "build_model",
    "forward",
    "DecodeConfig",
    "DecodeTrace",
    "PRESETS",
    "decode",
    "greedy_ar_decode",
    "arm_loss",
    "hybrid_loss",
    "mdm_loss",
    "dependency_probe",
    "js_divergence",
    "corrupt",
    "count_masking_patterns",
    "enumerate_patterns",
    "partition",
    "restore_order",
    "RunConfig",
    "toy_run",
    "train",
]
