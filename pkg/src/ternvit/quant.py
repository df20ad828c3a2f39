"""Ternary weight and 8-bit activation quantizers, dequantization and STE rules.

Weights use absmean scaling: ``alpha = mean(|W|)``, then every entry of
``W / (alpha + eps)`` is rounded to the nearest of {-1, 0, +1}.  Activations
use absmax scaling: ``gamma = max(|x|)`` and codes ``round(x * Q_b / gamma)``
clamped to ``[-(Q_b - 1), Q_b - 1]`` with ``Q_b = 2**(b - 1)``.

Scale arithmetic is done in float64.  Rounding is half away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor
from .trit_pack import PackedTrits, pack, unpack

__all__ = [
    "QuantConfig",
    "QuantizedActivations",
    "TernaryWeight",
    "absmean_scale",
    "dequantize",
    "quantize_activations",
    "quantize_weights",
    "round_clip",
    "round_half_away",
    "ste_activation_grad",
    "ste_weight_grad",
]


@dataclass(frozen=True)
class QuantConfig:
    b: int = 8
    eps: float = 1e-6
    eps_gamma: float = 1e-8

    def __post_init__(self):
        if self.b < 2:
            raise ValueError(f"activation bit-width must be >= 2, got {self.b}")
        if not (self.eps > 0 and self.eps_gamma > 0):
            raise ValueError("eps and eps_gamma must be positive")

    @property
    def q_b(self) -> int:
        return 2 ** (self.b - 1)

    @property
    def code_max(self) -> int:
        return self.q_b - 1


@dataclass(frozen=True)
class TernaryWeight:
    """A ternary matrix stored packed, plus its dequantization scale beta."""

    packed: PackedTrits
    beta: float

    @property
    def rows(self) -> int:
        return self.packed.n

    @property
    def cols(self) -> int:
        return self.packed.m

    @property
    def shape(self) -> tuple[int, int]:
        return (self.packed.n, self.packed.m)

    @property
    def trits(self) -> np.ndarray:
        return unpack(self.packed)


@dataclass(frozen=True)
class QuantizedActivations:
    codes: np.ndarray  # int8
    gamma: np.ndarray | float
    config: QuantConfig = field(default_factory=QuantConfig)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def round_half_away(x):
    """Round to nearest integer, ties away from zero.  Exact for all floats."""
    x = np.asarray(x, dtype=np.float64)
    r = np.rint(x)  # ties to even
    ties = np.abs(x - r) == 0.5  # subtraction is exact here
    if ties.any():
        r = np.where(ties, np.trunc(x) + np.sign(x), r)
    return r


def round_clip(x, a: float, b: float):
    """``max(a, min(b, round(x)))``; works on scalars and arrays."""
    if a > b:
        raise ValueError(f"round_clip bounds reversed: a={a} > b={b}")
    out = np.clip(round_half_away(x), a, b)
    return float(out) if np.ndim(out) == 0 else out


def _raw(w) -> np.ndarray:
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def absmean_scale(w) -> float:
    """Mean absolute value of a weight matrix, accumulated in float64."""
    arr = _raw(w)
    if arr.size == 0:
        raise ValueError("absmean_scale of an empty matrix")
    return float(np.abs(arr.astype(np.float64)).sum() / arr.size)


def ternarize(w, cfg: QuantConfig = QuantConfig()) -> tuple[np.ndarray, float]:
    """Unpacked ternary values (int8) and beta for a latent weight matrix."""
    arr = _raw(w).astype(np.float64)
    alpha = absmean_scale(arr)
    trits = round_clip(arr / (alpha + cfg.eps), -1, 1)
    return np.asarray(trits, dtype=np.int8), alpha


def quantize_weights(w, cfg: QuantConfig = QuantConfig()) -> TernaryWeight:
    arr = _raw(w)
    if arr.ndim != 2:
        raise ShapeError(f"weight must be a matrix, got shape {arr.shape}")
    trits, beta = ternarize(arr, cfg)
    return TernaryWeight(packed=pack(trits), beta=beta)


def activation_gamma(x: np.ndarray, cfg: QuantConfig = QuantConfig(), batch_dims: int = 0):
    """Absmax scale, one per index of the first ``batch_dims`` axes (scalar if 0)."""
    x = np.asarray(x)
    if batch_dims == 0:
        return max(float(np.abs(x).max(initial=0.0)), cfg.eps_gamma)
    axes = tuple(range(batch_dims, x.ndim))
    g = np.abs(x.astype(np.float64)).max(axis=axes, keepdims=True, initial=0.0)
    return np.maximum(g, cfg.eps_gamma)


def activation_codes(x: np.ndarray, gamma, cfg: QuantConfig = QuantConfig()) -> np.ndarray:
    scaled = (np.asarray(x, dtype=np.float64) * cfg.q_b) / gamma
    return np.clip(round_half_away(scaled), -cfg.code_max, cfg.code_max).astype(np.int8)


def quantize_activations(x, cfg: QuantConfig = QuantConfig(), batch_dims: int = 0) -> QuantizedActivations:
    """Absmax-quantize ``x`` to signed integer codes.

    With ``batch_dims=0`` a single gamma covers the whole tensor.  A positive
    ``batch_dims`` keeps one gamma per leading index (e.g. one per image).
    """
    arr = _raw(x)
    gamma = activation_gamma(arr, cfg, batch_dims)
    return QuantizedActivations(codes=activation_codes(arr, gamma, cfg), gamma=gamma, config=cfg)


def dequantize(y_int, beta: float, gamma, cfg: QuantConfig = QuantConfig()) -> np.ndarray:
    """Rescale integer products back to real units: ``y * beta * gamma / Q_b``."""
    scale = np.asarray(beta * np.asarray(gamma, dtype=np.float64) / cfg.q_b)
    return np.asarray(y_int, dtype=np.float64) * scale


def ste_weight_grad(grad_wrt_quantized, weight_shape: tuple[int, ...] | None = None) -> np.ndarray:
    """Straight-through: the gradient reaching the quantized weight passes to the latent weight unchanged."""
    g = _raw(grad_wrt_quantized)
    if weight_shape is not None and tuple(g.shape) != tuple(weight_shape):
        raise ShapeError(f"gradient shape {g.shape} does not match weight shape {tuple(weight_shape)}")
    return np.array(g, copy=True)


def ste_activation_grad(grad_wrt_quantized, x, gamma) -> np.ndarray:
    """Clipped straight-through: identity where ``|x| <= gamma``, zero where clipping saturates."""
    g = _raw(grad_wrt_quantized)
    xv = _raw(x)
    if g.shape != xv.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match activation shape {xv.shape}")
    return np.where(np.abs(xv) <= gamma, g, 0).astype(g.dtype)
