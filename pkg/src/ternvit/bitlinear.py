"""BitLinear: LayerNorm -> 8-bit absmax activations -> ternary product -> rescale.

Training keeps a full-precision latent weight and derives its ternary form on
every call.  Gradients pass straight through both quantizers: the quantized
weight ``beta * W_t`` and quantized activation ``gamma / Q_b * x_t`` are
treated as identity functions of their inputs (activations masked to
``|x| <= gamma``), with all scales held constant.

After :meth:`BitLinearLayer.freeze` the layer also runs the packed
multiplication-free kernel, producing exactly the same numbers.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .quant import (
    QuantConfig,
    TernaryWeight,
    activation_codes,
    activation_gamma,
    quantize_weights,
    ste_activation_grad,
    ste_weight_grad,
    ternarize,
)
from .tensor import ShapeError, Tensor, _node, no_grad
from .trit_pack import OpCounter, ternary_matmul

__all__ = ["BitLinearLayer", "StateError", "layer_norm"]


class StateError(RuntimeError):
    """Operation not valid in the object's current state (e.g. not frozen)."""


def layer_norm(x: Tensor, ln_eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance.

    No learnable gain or bias.
    """
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + ln_eps)
    xhat = centered * inv_std

    def _bw(g):
        g = g.astype(np.float64)
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((inv_std * (g - gm - xhat * gx)).astype(x.dtype),)

    return _node(xhat.astype(x.dtype), (x,), _bw)


def _integer_product(codes: np.ndarray, trits: np.ndarray, code_max: int) -> np.ndarray:
    """``codes @ trits.T`` exactly, as float64.

    Every partial sum is an integer of magnitude <= code_max * m, so float32
    BLAS is exact (in any summation order) while that stays below 2**24.
    """
    dt = np.float32 if code_max * trits.shape[1] < 2**24 else np.float64
    return np.matmul(codes.astype(dt), trits.T.astype(dt)).astype(np.float64)


Hook = Callable[["BitLinearLayer", np.ndarray, np.ndarray], None]


class BitLinearLayer:
    """Bias-free linear layer with ternary weights and 8-bit activations.

    ``latent_weight`` has shape ``(out_features, in_features)``.  Inputs are
    ``(t, in)`` or ``(batch, t, in)``; in the batched case one activation
    scale gamma is taken per batch element.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        cfg: QuantConfig | None = None,
        ln_eps: float = 1e-5,
        rng: np.random.Generator | None = None,
        weight: np.ndarray | None = None,
        name: str | None = None,
    ):
        self.in_features = in_features
        self.out_features = out_features
        self.cfg = cfg or QuantConfig()
        self.ln_eps = ln_eps
        self.name = name
        if weight is None:
            rng = rng or np.random.default_rng()
            weight = rng.normal(0.0, 1.0 / np.sqrt(in_features), size=(out_features, in_features)).astype(np.float32)
        weight = np.asarray(weight)
        if weight.shape != (out_features, in_features):
            raise ShapeError(f"latent weight must be {(out_features, in_features)}, got {weight.shape}")
        self.latent_weight: Tensor | None = Tensor(
            weight.astype(np.float32) if weight.dtype != np.float64 else weight,
            requires_grad=True,
            name=name,
        )
        self.frozen: TernaryWeight | None = None
        self.hooks: list[Hook] = []

    @classmethod
    def from_frozen(cls, frozen: TernaryWeight, cfg: QuantConfig | None = None, ln_eps: float = 1e-5, name=None):
        layer = cls.__new__(cls)
        layer.in_features = frozen.cols
        layer.out_features = frozen.rows
        layer.cfg = cfg or QuantConfig()
        layer.ln_eps = ln_eps
        layer.name = name
        layer.latent_weight = None
        layer.frozen = frozen
        layer.hooks = []
        return layer

    def parameters(self) -> list[Tensor]:
        return [] if self.latent_weight is None else [self.latent_weight]

    def _check(self, x: Tensor):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"BitLinear expects {self.in_features} input columns, got shape {x.shape}")

    def _run_hooks(self, trits, codes):
        for hook in self.hooks:
            hook(self, trits, codes)

    def forward_train(self, x: Tensor) -> Tensor:
        if self.latent_weight is None:
            raise StateError("layer holds no latent weight (loaded for inference only)")
        self._check(x)
        u = layer_norm(x, self.ln_eps)
        w = self.latent_weight
        trits, beta = ternarize(w.data, self.cfg)
        gamma = activation_gamma(u.data, self.cfg, batch_dims=u.ndim - 2)
        codes = activation_codes(u.data, gamma, self.cfg)
        self._run_hooks(trits, codes)

        y_int = _integer_product(codes, trits, self.cfg.code_max)
        scale = beta * np.asarray(gamma, dtype=np.float64) / self.cfg.q_b
        out = (y_int * scale).astype(u.dtype)

        def _bw(g):
            dt = u.dtype
            w_hat = (trits * beta).astype(dt)
            x_hat = (codes * (np.asarray(gamma, dtype=np.float64) / self.cfg.q_b)).astype(dt)
            grad_u = ste_activation_grad(g @ w_hat, u.data, gamma)
            flat_g = g.reshape(-1, g.shape[-1])
            flat_x = x_hat.reshape(-1, x_hat.shape[-1])
            grad_w = ste_weight_grad(flat_g.T @ flat_x, w.shape).astype(w.dtype)
            return grad_u, grad_w

        return _node(out, (u, w), _bw)

    def freeze(self, drop_latent: bool = False) -> TernaryWeight:
        """Quantize and pack the latent weight for the inference kernel."""
        if self.latent_weight is not None:
            self.frozen = quantize_weights(self.latent_weight.data, self.cfg)
        if self.frozen is None:
            raise StateError("nothing to freeze: no latent weight")
        if drop_latent:
            self.latent_weight = None
        return self.frozen

    def unfreeze(self) -> None:
        if self.latent_weight is None:
            raise StateError("cannot unfreeze an inference-only layer")
        self.frozen = None

    def forward_inference(self, x: Tensor, counter: OpCounter | None = None) -> Tensor:
        if self.frozen is None:
            raise StateError("forward_inference requires a frozen layer; call freeze() first")
        self._check(x)
        with no_grad():
            u = layer_norm(x, self.ln_eps)
        gamma = activation_gamma(u.data, self.cfg, batch_dims=u.ndim - 2)
        codes = activation_codes(u.data, gamma, self.cfg)
        self._run_hooks(self.frozen.trits if self.hooks else None, codes)
        y_int = ternary_matmul(self.frozen.packed, codes, counter)
        scale = self.frozen.beta * np.asarray(gamma, dtype=np.float64) / self.cfg.q_b
        return Tensor((y_int.astype(np.float64) * scale).astype(u.dtype))

    def __call__(self, x: Tensor) -> Tensor:
        if self.frozen is not None:
            return self.forward_inference(x)
        return self.forward_train(x)
