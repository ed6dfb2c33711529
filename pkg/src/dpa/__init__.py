"""Dual-path target propagation for attributing SwiGLU transformer logits."""

from .engine import (
    AttributionScores,
    EffectiveTargets,
    PathWeights,
    TargetSpec,
    attribute,
    propagate_all,
    sensitivity_config,
)
from .model import ActivationCache, ForwardOutput, Intervention, ModelConfig, ModelWeights, forward
from .zoo import ComponentRef, build_induction, build_kv_neuron, build_random, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "ActivationCache",
    "AttributionScores",
    "ComponentRef",
    "EffectiveTargets",
    "ForwardOutput",
    "Intervention",
    "ModelConfig",
    "ModelWeights",
    "PathWeights",
    "TargetSpec",
    "attribute",
    "build_induction",
    "build_kv_neuron",
    "build_random",
    "forward",
    "load_model",
    "propagate_all",
    "save_model",
    "sensitivity_config",
]
