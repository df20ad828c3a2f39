"""Vision Transformer with BitLinear encoder projections.

Images are cut into non-overlapping patches, projected to ``dim``, prefixed
with a learnable class token, offset by learnable position embeddings and run
through ``depth`` residual encoder blocks.  The class-token output is
normalized (bare LayerNorm) and classified by a full-precision head.

Every linear inside the encoder is a :class:`BitLinearLayer` when
``quantized`` is set.  Otherwise it is a :class:`NormLinear`: the same bare
LayerNorm followed by a full-precision product, so both variants have
identical parameter shapes and differ only in quantization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterator

import numpy as np

from .bitlinear import BitLinearLayer, layer_norm
from .quant import QuantConfig
from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    matmul,
    mul,
    reshape,
    softmax_rows,
    transpose,
)

__all__ = [
    "EncoderBlock",
    "Linear",
    "NormLinear",
    "PRESETS",
    "VitConfig",
    "VitModel",
    "patchify",
    "predict_topk",
    "weight_entries",
]

PRESETS = {
    "tiny": dict(dim=192, depth=4, heads=3, mlp_dim=768),
    "small": dict(dim=384, depth=8, heads=6, mlp_dim=1536),
    "large": dict(dim=1024, depth=24, heads=16, mlp_dim=4096),
}


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 192
    depth: int = 4
    heads: int = 3
    mlp_dim: int = 768
    num_classes: int = 10
    quantized: bool = True
    act_bits: int = 8
    quant_eps: float = 1e-6
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")
        if min(self.image_size, self.patch_size, self.channels, self.dim, self.depth, self.mlp_dim, self.num_classes) < 1:
            raise ValueError("all VitConfig sizes must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "VitConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def quant_config(self) -> QuantConfig:
        return QuantConfig(b=self.act_bits, eps=self.quant_eps)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "VitConfig":
        return replace(self, **changes)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(C, H, W)`` (or ``(B, C, H, W)``) into flattened patches.

    Patches are ordered row-major over the patch grid; each is flattened
    channel-major, then row-major within the patch.
    """
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W), got {np.shape(image)}")
    b, c, h, w = img.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = img.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
    return out[0] if single else out


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class Linear:
    """Plain full-precision ``y = x W^T + b``."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, name: str = ""):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_normal(rng, (out_features, in_features), 1.0 / math.sqrt(in_features)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True, name=f"{name}.bias") if bias else None

    def parameters(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight.T)
        return y + self.bias if self.bias is not None else y


class NormLinear:
    """Full-precision twin of BitLinear: bare LayerNorm then a bias-free product."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, ln_eps: float = 1e-5, name: str = ""):
        self.in_features = in_features
        self.out_features = out_features
        self.ln_eps = ln_eps
        self.latent_weight = Tensor(_normal(rng, (out_features, in_features), 1.0 / math.sqrt(in_features)), requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return [self.latent_weight]

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(layer_norm(x, self.ln_eps), self.latent_weight.T)


class EncoderBlock:
    LINEARS = ("q", "k", "v", "o", "fc1", "fc2")

    def __init__(self, cfg: VitConfig, rng: np.random.Generator, prefix: str = ""):
        self.cfg = cfg
        d, h = cfg.dim, cfg.mlp_dim
        shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "fc1": (d, h), "fc2": (h, d)}
        for name, (fan_in, fan_out) in shapes.items():
            full = f"{prefix}{name}.weight"
            if cfg.quantized:
                layer = BitLinearLayer(fan_in, fan_out, cfg.quant_config, cfg.ln_eps, rng=rng, name=full)
            else:
                layer = NormLinear(fan_in, fan_out, rng, cfg.ln_eps, name=full)
            setattr(self, name, layer)

    def linears(self) -> Iterator[tuple[str, object]]:
        for name in self.LINEARS:
            yield name, getattr(self, name)

    def attention(self, x: Tensor, project: bool = True) -> Tensor:
        """Multi-head scaled dot-product self-attention over ``(B, t, dim)`` tokens."""
        squeeze = x.ndim == 2
        if squeeze:
            x = reshape(x, (1,) + x.shape)
        b, t, d = x.shape
        h, hd = self.cfg.heads, self.cfg.head_dim

        def heads(y: Tensor) -> Tensor:
            return transpose(reshape(y, (b, t, h, hd)), (0, 2, 1, 3))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = mul(matmul(q, k.T), 1.0 / math.sqrt(hd))
        ctx = matmul(softmax_rows(scores), v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        out = self.o(ctx) if project else ctx
        return reshape(out, (t, d)) if squeeze else out

    def mlp(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(x)
        return x + self.mlp(x)


class VitModel:
    def __init__(self, cfg: VitConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.patch_projection = Linear(cfg.patch_dim, cfg.dim, rng, name="patch_projection")
        self.class_token = Tensor(_normal(rng, (1, cfg.dim), 0.02), requires_grad=True, name="class_token")
        self.pos_embedding = Tensor(_normal(rng, (cfg.num_patches + 1, cfg.dim), 0.02), requires_grad=True, name="pos_embedding")
        self.blocks = [EncoderBlock(cfg, rng, prefix=f"blocks.{i}.") for i in range(cfg.depth)]
        self.head = Linear(cfg.dim, cfg.num_classes, rng, name="head")
        # per-channel standardization stats, carried into checkpoints
        self.norm_mean: list[float] | None = None
        self.norm_std: list[float] | None = None

    def encoder_linears(self) -> Iterator[tuple[str, object]]:
        for i, block in enumerate(self.blocks):
            for name, layer in block.linears():
                yield f"blocks.{i}.{name}.weight", layer

    def bitlinear_layers(self) -> list[BitLinearLayer]:
        return [layer for _, layer in self.encoder_linears() if isinstance(layer, BitLinearLayer)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = [
            ("patch_projection.weight", self.patch_projection.weight),
            ("patch_projection.bias", self.patch_projection.bias),
            ("class_token", self.class_token),
            ("pos_embedding", self.pos_embedding),
        ]
        for name, layer in self.encoder_linears():
            if layer.latent_weight is not None:
                params.append((name, layer.latent_weight))
        params += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return params

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self, drop_latent: bool = False) -> None:
        for layer in self.bitlinear_layers():
            layer.freeze(drop_latent=drop_latent)

    def unfreeze(self) -> None:
        for layer in self.bitlinear_layers():
            layer.unfreeze()

    @property
    def is_frozen(self) -> bool:
        layers = self.bitlinear_layers()
        return bool(layers) and all(layer.frozen is not None for layer in layers)

    def embed(self, images) -> Tensor:
        """Patch projection plus class token and position embedding: ``(B, P + 1, dim)``."""
        cfg = self.cfg
        imgs = np.asarray(images, dtype=np.float32)
        if imgs.ndim == 3:
            imgs = imgs[None]
        if imgs.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"expected images of shape (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {imgs.shape}"
            )
        b = imgs.shape[0]
        tokens = self.patch_projection(Tensor(patchify(imgs, cfg.patch_size)))
        cls = broadcast_to(reshape(self.class_token, (1, 1, cfg.dim)), (b, 1, cfg.dim))
        return concat([cls, tokens], axis=1) + self.pos_embedding

    def forward(self, images) -> Tensor:
        """Logits ``(B, num_classes)`` for a batch ``(B, C, H, W)``."""
        x = self.embed(images)
        for block in self.blocks:
            x = block(x)
        cls_out = layer_norm(x[:, 0, :], self.cfg.ln_eps)
        return self.head(cls_out)

    __call__ = forward


def weight_entries(cfg: VitConfig, ternary: bool = True) -> list[tuple[str, int, int, str]]:
    """``(name, n, m, precision)`` for every parameter, in checkpoint order, without building a model.

    Vectors count as ``1 x len`` matrices.  Encoder linears are ``"ternary"``
    when ``ternary`` is set; everything else is always ``"fp32"``.
    """
    d = cfg.dim
    entries = [
        ("patch_projection.weight", d, cfg.patch_dim, "fp32"),
        ("patch_projection.bias", 1, d, "fp32"),
        ("class_token", 1, d, "fp32"),
        ("pos_embedding", cfg.num_patches + 1, d, "fp32"),
    ]
    shapes = {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d), "fc1": (cfg.mlp_dim, d), "fc2": (d, cfg.mlp_dim)}
    for i in range(cfg.depth):
        for name in EncoderBlock.LINEARS:
            n, m = shapes[name]
            entries.append((f"blocks.{i}.{name}.weight", n, m, "ternary" if ternary else "fp32"))
    entries += [("head.weight", cfg.num_classes, d, "fp32"), ("head.bias", 1, cfg.num_classes, "fp32")]
    return entries


def predict_topk(logits, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits per row, descending; ties go to the lower index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    n_classes = z.shape[-1]
    if not 1 <= k <= n_classes:
        raise ValueError(f"k must be in [1, {n_classes}], got {k}")
    return np.argsort(-z, axis=-1, kind="stable")[..., :k]
