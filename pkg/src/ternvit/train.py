"""Quantization-aware training loop.

The optimizer only ever sees the full-precision latent weights and keeps its
moment estimates in float32; ternary weights and 8-bit activations exist only
inside each forward pass.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .data import LabeledImageSet
from .tensor import Tensor, backward, cross_entropy, no_grad
from .vit import VitConfig, VitModel, predict_topk

__all__ = [
    "AdamW",
    "MetricsRecord",
    "TrainConfig",
    "TrainingDiverged",
    "evaluate",
    "fit",
    "lr_at",
    "model_for_run",
    "seed_streams",
    "steps_to_threshold",
    "train_step",
    "window_means",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, grad_norm: float, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step} (lr={lr:.3g}, grad_norm={grad_norm:.3g})")
        self.step, self.lr, self.grad_norm, self.loss = step, lr, grad_norm, loss


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_steps: int | None = None  # None: 5% of total steps
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    dataset: str = "synthetic"
    model: str = "tiny"
    quantized: bool = True
    log_every: int = 20
    eval_ks: tuple[int, ...] = (1, 3)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")

    def steps_per_epoch(self, n_samples: int) -> int:
        return math.ceil(n_samples / self.batch_size)

    def resolved_warmup(self, total_steps: int) -> int:
        return self.warmup_steps if self.warmup_steps is not None else int(0.05 * total_steps)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    train_loss: float
    learning_rate: float
    eval_top1: float | None = None
    eval_topk: dict[int, float] = field(default_factory=dict)
    wall_time: float | None = None

    def to_line(self) -> str:
        parts = [f"step={self.step}", f"epoch={self.epoch}", f"train_loss={self.train_loss:.6f}", f"lr={self.learning_rate:.6e}"]
        if self.eval_top1 is not None:
            parts.append(f"top1={self.eval_top1:.6f}")
        for k in sorted(self.eval_topk):
            if k != 1:
                parts.append(f"top{k}={self.eval_topk[k]:.6f}")
        if self.wall_time is not None:
            parts.append(f"wall_time={self.wall_time:.3f}")
        return " ".join(parts)

    @classmethod
    def from_line(cls, line: str) -> "MetricsRecord":
        kv = dict(item.split("=", 1) for item in line.split())
        topk = {int(key[3:]): float(v) for key, v in kv.items() if key.startswith("top") and key != "top1"}
        top1 = float(kv["top1"]) if "top1" in kv else None
        if top1 is not None:
            topk[1] = top1
        return cls(
            step=int(kv["step"]),
            epoch=int(kv["epoch"]),
            train_loss=float(kv["train_loss"]),
            learning_rate=float(kv["lr"]),
            eval_top1=top1,
            eval_topk=topk,
            wall_time=float(kv["wall_time"]) if "wall_time" in kv else None,
        )

    @property
    def is_eval(self) -> bool:
        return self.eval_top1 is not None


def lr_at(step: int, base_lr: float, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay reaching 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    decay = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / decay, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if lr == 0.0:
                continue
            p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))


def train_step(model, images, labels, opt: AdamW, lr: float, step: int = 0) -> float:
    """One forward/backward/update; returns the loss measured before the update."""
    loss = cross_entropy(model(images), labels)
    value = loss.item()
    backward(loss)
    if not math.isfinite(value):
        norm = grad_norm(opt.params)
        opt.zero_grad()
        raise TrainingDiverged(step, lr, norm, value)
    opt.step(lr)
    opt.zero_grad()
    return value


def evaluate(model: Callable, dataset: LabeledImageSet, ks: Sequence[int] = (1, 3), batch_size: int = 256) -> dict[int, float]:
    """Top-k accuracy for each ``k`` in ``ks``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    ks = tuple(ks)
    hits = {k: 0 for k in ks}
    kmax = max(ks)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            imgs = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            top = predict_topk(model(imgs), kmax)
            for k in ks:
                hits[k] += int((top[:, :k] == labels[:, None]).any(axis=1).sum())
    return {k: hits[k] / len(dataset) for k in ks}


def seed_streams(seed: int) -> tuple[int, int]:
    """Independent (init, shuffle) seeds derived from one master seed."""
    init, shuffle = np.random.SeedSequence(seed).spawn(2)
    return int(init.generate_state(1)[0]), int(shuffle.generate_state(1)[0])


def model_for_run(vit_cfg: VitConfig, seed: int) -> VitModel:
    return VitModel(vit_cfg, seed=seed_streams(seed)[0])


@dataclass
class FitResult:
    records: list[MetricsRecord]
    step_losses: list[float]
    final_eval: dict[int, float] | None


def fit(
    model: VitModel,
    train_set: LabeledImageSet,
    cfg: TrainConfig,
    eval_set: LabeledImageSet | None = None,
    metrics_out: TextIO | None = None,
    record_wall_time: bool = False,
    on_record: Callable[[MetricsRecord], None] | None = None,
) -> FitResult:
    """Train ``model`` in place.

    A record is emitted every ``cfg.log_every`` steps (mean loss over that
    window) and after every epoch (epoch mean loss plus eval accuracies).
    """
    _, shuffle_seed = seed_streams(cfg.seed)
    rng = np.random.default_rng(shuffle_seed)
    n = len(train_set)
    per_epoch = cfg.steps_per_epoch(n)
    total = cfg.epochs * per_epoch
    warmup = cfg.resolved_warmup(total)
    ks = tuple(k for k in cfg.eval_ks if k <= train_set.class_count) or (1,)
    opt = AdamW(model.parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay)
    t0 = time.perf_counter()
    records: list[MetricsRecord] = []
    losses: list[float] = []
    final_eval = None

    def emit(rec: MetricsRecord):
        if record_wall_time:
            rec.wall_time = time.perf_counter() - t0
        records.append(rec)
        if metrics_out is not None:
            metrics_out.write(rec.to_line() + "\n")
            metrics_out.flush()
        if on_record is not None:
            on_record(rec)

    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = lr_at(step, cfg.base_lr, total, warmup)
            loss = train_step(model, train_set.images[idx], train_set.labels[idx], opt, lr, step)
            step += 1
            losses.append(loss)
            epoch_losses.append(loss)
            if step % cfg.log_every == 0:
                emit(MetricsRecord(step, epoch, float(np.mean(losses[-cfg.log_every :])), lr))
        rec = MetricsRecord(step, epoch, float(np.mean(epoch_losses)), lr)
        if eval_set is not None:
            final_eval = evaluate(model, eval_set, ks)
            rec.eval_top1 = final_eval[1] if 1 in final_eval else None
            rec.eval_topk = dict(final_eval)
        emit(rec)
    return FitResult(records, losses, final_eval)


def window_means(losses: Sequence[float], window: int = 20) -> np.ndarray:
    """Means of consecutive non-overlapping ``window``-step blocks (partial tail dropped)."""
    arr = np.asarray(losses, dtype=np.float64)
    blocks = len(arr) // window
    return arr[: blocks * window].reshape(blocks, window).mean(axis=1)


def steps_to_threshold(losses: Sequence[float], threshold: float, window: int = 20) -> int | None:
    """First step at which the trailing ``window``-step mean loss is <= ``threshold``."""
    arr = np.asarray(losses, dtype=np.float64)
    if len(arr) < window:
        return None
    trailing = np.convolve(arr, np.ones(window) / window, mode="valid")
    hit = np.flatnonzero(trailing <= threshold)
    return int(hit[0]) + window if hit.size else None
