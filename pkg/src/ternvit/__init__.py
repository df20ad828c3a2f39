"""Ternary-weight Vision Transformer: quantization-aware training and packed inference."""

from .bitlinear import BitLinearLayer, StateError, layer_norm
from .quant import (
    QuantConfig,
    QuantizedActivations,
    TernaryWeight,
    absmean_scale,
    dequantize,
    quantize_activations,
    quantize_weights,
    round_clip,
)
from .tensor import ShapeError, Tensor, backward, no_grad
from .trit_pack import OpCounter, PackedTrits, pack, packed_size_report, ternary_matmul, unpack
from .vit import VitConfig, VitModel, patchify, predict_topk, weight_entries

__version__ = "0.1.0"

__all__ = [
    "BitLinearLayer",
    "OpCounter",
    "PackedTrits",
    "QuantConfig",
    "QuantizedActivations",
    "ShapeError",
    "StateError",
    "Tensor",
    "TernaryWeight",
    "VitConfig",
    "VitModel",
    "absmean_scale",
    "backward",
    "dequantize",
    "layer_norm",
    "no_grad",
    "pack",
    "packed_size_report",
    "patchify",
    "predict_topk",
    "weight_entries",
    "quantize_activations",
    "quantize_weights",
    "round_clip",
    "ternary_matmul",
    "unpack",
]
