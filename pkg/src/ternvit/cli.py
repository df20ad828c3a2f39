"""Command-line entry point: ``ternvit {train,eval,export,bench}``.

Every command prints machine-readable ``key=value`` lines on stdout followed
by a short human summary.  Exit codes: 0 success, 1 runtime or data error,
2 usage error.
"""

from __future__ import annotations

import argparse
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import model_io
from .bitlinear import StateError
from .data import DATA_DIR_ENV, CorruptDataError, DataFormatError, load_dataset
from .tensor import Tensor, matmul
from .train import TrainConfig, TrainingDiverged, evaluate, fit, model_for_run
from .trit_pack import OpCounter, pack, packed_row_bytes, packed_size_report, ternary_matmul
from .vit import PRESETS, VitConfig

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

IMAGE_GEOMETRY = {"mnist": (28, 1), "cifar10": (32, 3)}
DEFAULT_PATCH = {28: 7, 32: 4}


class UsageError(Exception):
    pass


def _out(line: str = "") -> None:
    print(line, flush=True)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr, flush=True)


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


def _topk_list(value: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(v) for v in value.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --topk list {value!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("--topk needs positive integers")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ternvit", description="Ternary-weight Vision Transformer toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="quantization-aware training")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"], default="synthetic")
    p.add_argument("--data-dir", type=Path, default=None, help=f"defaults to ${DATA_DIR_ENV}")
    p.add_argument("--model", choices=sorted(PRESETS), default="tiny")
    p.add_argument("--quantized", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--epochs", type=_positive, default=5)
    p.add_argument("--batch-size", type=_positive, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit-train", type=_positive, default=None)
    p.add_argument("--limit-eval", type=_positive, default=None)
    p.add_argument("--patch-size", type=_positive, default=None)
    p.add_argument("--image-size", type=_positive, default=32, help="synthetic dataset only")
    p.add_argument("--classes", type=_positive, default=10, help="synthetic dataset only")
    p.add_argument("--log-every", type=_positive, default=20)
    p.add_argument("--record-wall-time", action="store_true", help="add wall_time to metrics records")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--metrics", type=Path, required=True)

    p = sub.add_parser("eval", help="top-k accuracy of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10", "synthetic"], default="synthetic")
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--topk", type=_topk_list, default=(1, 3))
    p.add_argument("--limit-eval", type=_positive, default=None)
    p.add_argument("--seed", type=int, default=0, help="synthetic dataset only")
    p.add_argument("--batch-size", type=_positive, default=256)

    p = sub.add_parser("export", help="freeze a latent checkpoint into packed ternary form")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("bench", help="dense fp32 vs packed ternary kernel throughput")
    p.add_argument("--dim", type=_positive, default=512)
    p.add_argument("--batch", type=_positive, default=64)
    p.add_argument("--iters", type=_positive, default=10)
    p.add_argument("--threads", type=_positive, default=1)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _geometry(args) -> tuple[int, int, int]:
    if args.dataset == "synthetic":
        image_size, channels = args.image_size, 3
    else:
        image_size, channels = IMAGE_GEOMETRY[args.dataset]
    patch = args.patch_size or DEFAULT_PATCH.get(image_size, 4)
    if image_size % patch:
        raise UsageError(f"--patch-size {patch} does not divide image size {image_size}")
    return image_size, channels, patch


def cmd_train(args) -> int:
    image_size, channels, patch = _geometry(args)
    classes = args.classes if args.dataset == "synthetic" else 10
    if args.lr <= 0:
        raise UsageError("--lr must be positive")
    preset = PRESETS[args.model]
    if args.dataset == "synthetic" and classes < 2:
        raise UsageError("--classes must be >= 2")
    vit_cfg = VitConfig(image_size=image_size, patch_size=patch, channels=channels, num_classes=classes, quantized=args.quantized, **preset)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        base_lr=args.lr,
        warmup_steps=args.warmup_steps,
        seed=args.seed,
        dataset=args.dataset,
        model=args.model,
        quantized=args.quantized,
        log_every=args.log_every,
    )
    _out("command=" + " ".join(args.argv))
    _out(
        f"config dataset={args.dataset} model={args.model} quantized={'on' if args.quantized else 'off'} "
        f"image_size={image_size} patch_size={patch} channels={channels} classes={classes} dim={vit_cfg.dim} "
        f"depth={vit_cfg.depth} heads={vit_cfg.heads} mlp_dim={vit_cfg.mlp_dim} epochs={args.epochs} "
        f"batch_size={args.batch_size} lr={args.lr} seed={args.seed}"
    )

    train_set = load_dataset(args.dataset, "train", args.data_dir, args.limit_train, args.seed, image_size, classes)
    eval_set = load_dataset(args.dataset, "test", args.data_dir, args.limit_eval, args.seed, image_size, classes)
    train_set = train_set.normalized()
    eval_set = eval_set.normalized(train_set.mean, train_set.std)

    model = model_for_run(vit_cfg, args.seed)
    model.norm_mean, model.norm_std = list(train_set.mean), list(train_set.std)
    t0 = time.perf_counter()
    with open(args.metrics, "w") as fh:
        result = fit(
            model,
            train_set,
            train_cfg,
            eval_set,
            metrics_out=fh,
            record_wall_time=args.record_wall_time,
            on_record=lambda rec: _out("metrics " + rec.to_line()),
        )
    elapsed = time.perf_counter() - t0
    summary = {
        "dataset": args.dataset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "train_samples": len(train_set),
        "steps": len(result.step_losses),
        "final_loss": float(np.mean(result.step_losses[-args.log_every :])),
    }
    for k, acc in (result.final_eval or {}).items():
        summary[f"top{k}"] = acc
    size = model_io.save(model, args.out, "latent", summary)
    accs = " ".join(f"top{k}={v:.4f}" for k, v in sorted((result.final_eval or {}).items()))
    _out(f"summary {accs} final_loss={summary['final_loss']:.6f} steps={summary['steps']} checkpoint_bytes={size}")
    _out(f"# trained {summary['steps']} steps in {elapsed:.1f}s; checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = model_io.load(args.checkpoint)
    cfg = ckpt.config
    if args.dataset != "synthetic":
        image_size, channels = IMAGE_GEOMETRY[args.dataset]
        if (image_size, channels) != (cfg.image_size, cfg.channels):
            raise UsageError(f"{args.dataset} images are {channels}x{image_size}x{image_size}, checkpoint expects {cfg.channels}x{cfg.image_size}x{cfg.image_size}")
    if max(args.topk) > cfg.num_classes:
        raise UsageError(f"--topk {max(args.topk)} exceeds {cfg.num_classes} classes")
    ds = load_dataset(args.dataset, "test", args.data_dir, args.limit_eval, args.seed, cfg.image_size, cfg.num_classes)
    model = ckpt.model
    ds = ds.normalized(model.norm_mean, model.norm_std) if model.norm_mean else ds.normalized()
    accs = evaluate(model, ds, args.topk, args.batch_size)
    _out(f"command=eval checkpoint={args.checkpoint} kind={ckpt.kind} samples={len(ds)}")
    _out("eval " + " ".join(f"top{k}={accs[k]:.6f}" for k in args.topk))
    _out(f"# {ckpt.kind} checkpoint, {len(ds)} samples: " + ", ".join(f"top-{k} {100 * accs[k]:.2f}%" for k in args.topk))
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = model_io.load(args.checkpoint)
    if ckpt.kind == "ternary":
        print(f"warning: {args.checkpoint} is already ternary; copying unchanged", file=sys.stderr)
        shutil.copyfile(args.checkpoint, args.out)
        return EXIT_OK
    model = ckpt.model
    entries = model_io.model_weight_entries(model)
    report = packed_size_report(entries)
    model.freeze(drop_latent=True)
    summary = {k: v for k, v in ckpt.train_summary.items()}
    packed_bytes = model_io.save(model, args.out, "ternary", summary)
    latent_bytes = Path(args.checkpoint).stat().st_size
    enc = packed_size_report([e for e in entries if e[3] == "ternary"])
    _out(f"command=export checkpoint={args.checkpoint} out={args.out}")
    _out(f"weights {report.format()}")
    _out(f"encoder {enc.format()}")
    _out(f"file latent_bytes={latent_bytes} ternary_bytes={packed_bytes} file_ratio={latent_bytes / packed_bytes:.3f}")
    _out(f"# exported {len(model.bitlinear_layers())} BitLinear layers; file is {latent_bytes / packed_bytes:.1f}x smaller")
    return EXIT_OK


def _pin_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=n)


def cmd_bench(args) -> int:
    limiter = _pin_threads(args.threads)
    try:
        rng = np.random.default_rng(args.seed)
        dim, batch = args.dim, args.batch
        x = Tensor(rng.standard_normal((batch, dim)).astype(np.float32))
        w = Tensor(rng.standard_normal((dim, dim)).astype(np.float32))
        trits = rng.integers(-1, 2, size=(dim, dim)).astype(np.int8)
        packed = pack(trits)
        codes = rng.integers(-127, 128, size=(batch, dim)).astype(np.int8)
        ternary_matmul(packed, codes)  # builds the kernel plan outside the timed loop

        t0 = time.perf_counter()
        for _ in range(args.iters):
            matmul(x, w)
        fp_s = (time.perf_counter() - t0) / args.iters

        counter = OpCounter()
        t0 = time.perf_counter()
        for _ in range(args.iters):
            ternary_matmul(packed, codes, counter)
        tern_s = (time.perf_counter() - t0) / args.iters
    finally:
        if limiter is not None:
            limiter.unregister()

    macs = batch * dim * dim
    fp_bytes = 4 * dim * dim
    tern_bytes = dim * packed_row_bytes(dim)
    _out(f"command=bench dim={dim} batch={batch} iters={args.iters} threads={args.threads}")
    _out(f"fp32 seconds_per_iter={fp_s:.6e} macs_per_s={macs / fp_s:.4e} mults_per_iter={macs} weight_bytes={fp_bytes}")
    _out(
        f"ternary seconds_per_iter={tern_s:.6e} macs_per_s={macs / tern_s:.4e} adds={counter.adds} subs={counter.subs} "
        f"mults={counter.mults} weight_bytes={tern_bytes}"
    )
    _out(f"ratio throughput={fp_s / tern_s:.4f} weight_bytes={fp_bytes / tern_bytes:.4f}")
    _out(f"# ternary kernel: {counter.mults} multiplications, {fp_bytes / tern_bytes:.1f}x fewer weight bytes, {fp_s / tern_s:.2f}x fp32 throughput")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    args.argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _err(str(exc))
        return EXIT_USAGE
    except model_io.CheckpointError as exc:
        _err(f"checkpoint {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME
    except (FileNotFoundError, DataFormatError, CorruptDataError, StateError, TrainingDiverged, ValueError, OSError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
