"""Layers, optimizer, schedule and low-rank adapters used by the model."""

from .layers import (
    EncoderLayer,
    EncoderLayerConfig,
    MultiHeadAttention,
    count_parameters,
    encoder_layer_param_count,
)
from .lora import LoraLinear, lora_wrap, merge_lora, wrap_modules
from .optim import (
    NonFiniteGradientError,
    OneCycleSchedule,
    clip_grad_norm,
    make_optimizer,
    onecycle_lr,
)
from .gradcheck import ReluPattern, grad_check

__all__ = [
    "EncoderLayer",
    "EncoderLayerConfig",
    "MultiHeadAttention",
    "count_parameters",
    "encoder_layer_param_count",
    "LoraLinear",
    "lora_wrap",
    "merge_lora",
    "wrap_modules",
    "NonFiniteGradientError",
    "OneCycleSchedule",
    "clip_grad_norm",
    "make_optimizer",
    "onecycle_lr",
    "ReluPattern",
    "grad_check",
]
