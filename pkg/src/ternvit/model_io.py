"""Binary checkpoints for latent (trainable) and ternary (packed, inference-only) models.

Layout, all integers little-endian::

    b"TVIT"                      magic
    u32 format_version           currently 1
    u32 header_len, header       UTF-8 "key=value" lines
    u32 tensor_count
    tensor_count records:
        u32 name_len, name       UTF-8
        u8  dtype                0 = fp32, 1 = packed trits
        u32 rank, u32 dims[rank]
        f32 beta                 dtype 1 only
        payload                  fp32: 4 * prod(dims) bytes
                                 packed: dims[0] * ceil(dims[1] / 5) bytes

The file is read completely and validated before any model is built.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bitlinear import BitLinearLayer, StateError
from .quant import TernaryWeight
from .trit_pack import CorruptTritsError, PackedTrits, packed_row_bytes, unpack
from .vit import VitConfig, VitModel, weight_entries

__all__ = [
    "CheckpointCorruptError",
    "CheckpointError",
    "CheckpointFormatError",
    "FORMAT_VERSION",
    "LoadedCheckpoint",
    "MAGIC",
    "TensorRecord",
    "UnsupportedVersionError",
    "load",
    "model_weight_entries",
    "read_records",
    "save",
]

MAGIC = b"TVIT"
FORMAT_VERSION = 1
DTYPE_FP32 = 0
DTYPE_PACKED = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a checkpoint of this format (bad magic) or an unreadable header."""


class UnsupportedVersionError(CheckpointFormatError):
    pass


class CheckpointCorruptError(CheckpointError):
    """Truncated file or payloads inconsistent with the declared dims/config."""


@dataclass
class TensorRecord:
    name: str
    dtype: int
    dims: tuple[int, ...]
    payload: bytes
    beta: float | None = None

    @property
    def payload_len(self) -> int:
        return len(self.payload)


@dataclass
class LoadedCheckpoint:
    model: VitModel
    kind: str
    config: VitConfig
    header: dict[str, str]

    @property
    def train_summary(self) -> dict[str, str]:
        return {k[len("train."):]: v for k, v in self.header.items() if k.startswith("train.")}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _header_dict(model: VitModel, kind: str, train_summary: dict | None) -> dict[str, str]:
    head = {"kind": kind}
    for key, value in model.cfg.to_dict().items():
        head[f"config.{key}"] = _fmt(value)
    for key, value in (train_summary or {}).items():
        head[f"train.{key}"] = _fmt(value)
    if model.norm_mean is not None:
        head["norm.mean"] = ",".join(repr(float(v)) for v in model.norm_mean)
        head["norm.std"] = ",".join(repr(float(v)) for v in model.norm_std)
    return head


def _encode_header(head: dict[str, str]) -> bytes:
    lines = []
    for k, v in head.items():
        if "\n" in k or "\n" in v or "=" in k:
            raise ValueError(f"header entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _fp32_record(name: str, arr: np.ndarray) -> TensorRecord:
    data = np.ascontiguousarray(arr, dtype="<f4")
    return TensorRecord(name, DTYPE_FP32, tuple(data.shape), data.tobytes())


def _records(model: VitModel, kind: str) -> list[TensorRecord]:
    recs = []
    for name, param in model.named_parameters():
        if kind == "ternary" and name.startswith("blocks."):
            continue
        recs.append(_fp32_record(name, param.data))
    if kind == "ternary":
        encoder = []
        for name, layer in model.encoder_linears():
            tw = layer.frozen
            encoder.append(TensorRecord(name, DTYPE_PACKED, tw.shape, tw.packed.tobytes(), tw.beta))
        # keep the named_parameters order: embeddings, encoder, head
        head = [r for r in recs if r.name.startswith("head.")]
        recs = [r for r in recs if not r.name.startswith("head.")] + encoder + head
    return recs


def _write_record(buf: io.BytesIO, rec: TensorRecord) -> None:
    name = rec.name.encode("utf-8")
    buf.write(struct.pack("<I", len(name)))
    buf.write(name)
    buf.write(struct.pack("<BI", rec.dtype, len(rec.dims)))
    buf.write(struct.pack(f"<{len(rec.dims)}I", *rec.dims))
    if rec.dtype == DTYPE_PACKED:
        buf.write(struct.pack("<f", rec.beta))
    buf.write(rec.payload)


def serialize(model: VitModel, kind: str = "latent", train_summary: dict | None = None) -> bytes:
    if kind not in ("latent", "ternary"):
        raise ValueError(f"kind must be 'latent' or 'ternary', got {kind!r}")
    if kind == "ternary":
        linears = list(model.encoder_linears())
        if not model.cfg.quantized:
            raise StateError("a full-precision model has no BitLinear layers to export as ternary")
        unfrozen = [name for name, layer in linears if layer.frozen is None]
        if unfrozen:
            raise StateError(f"ternary checkpoint needs frozen BitLinear layers; not frozen: {unfrozen[0]} (+{len(unfrozen) - 1} more)")
    elif any(layer.latent_weight is None for _, layer in model.encoder_linears()):
        raise StateError("model has no latent weights (loaded from a ternary checkpoint)")
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = _encode_header(_header_dict(model, kind, train_summary))
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header)))
    buf.write(header)
    recs = _records(model, kind)
    buf.write(struct.pack("<I", len(recs)))
    for rec in recs:
        _write_record(buf, rec)
    return buf.getvalue()


def save(model: VitModel, path, kind: str = "latent", train_summary: dict | None = None) -> int:
    """Write ``model`` atomically (temp file + rename); returns bytes written."""
    blob = serialize(model, kind, train_summary)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise CheckpointCorruptError(f"truncated checkpoint while reading {what} at offset {self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _payload_len(dtype: int, dims: tuple[int, ...]) -> int:
    if dtype == DTYPE_FP32:
        return 4 * int(np.prod(dims, dtype=np.int64))
    if len(dims) != 2:
        raise CheckpointCorruptError(f"packed tensor must be rank 2, got dims {dims}")
    return dims[0] * packed_row_bytes(dims[1])


def read_records(blob: bytes) -> tuple[dict[str, str], list[TensorRecord]]:
    """Parse and structurally validate a checkpoint image."""
    r = _Reader(blob)
    if len(blob) < 4 or r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}; not a {MAGIC.decode()} checkpoint")
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint format version {version} (supported: {FORMAT_VERSION})")
    (hlen,) = r.unpack("<I", "header length")
    try:
        text = r.take(hlen, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"header is not UTF-8: {exc}") from None
    header = {}
    for line in filter(None, text.split("\n")):
        if "=" not in line:
            raise CheckpointFormatError(f"malformed header line {line!r}")
        k, v = line.split("=", 1)
        header[k] = v
    (count,) = r.unpack("<I", "tensor count")
    records = []
    for _ in range(count):
        (nlen,) = r.unpack("<I", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        dtype, rank = r.unpack("<BI", f"dtype/rank of {name}")
        if dtype not in (DTYPE_FP32, DTYPE_PACKED):
            raise CheckpointCorruptError(f"{name}: unknown dtype code {dtype}")
        if rank > 8:
            raise CheckpointCorruptError(f"{name}: implausible rank {rank}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        beta = r.unpack("<f", f"beta of {name}")[0] if dtype == DTYPE_PACKED else None
        payload = r.take(_payload_len(dtype, dims), f"payload of {name}")
        records.append(TensorRecord(name, dtype, tuple(dims), payload, beta))
    if r.pos != len(blob):
        raise CheckpointCorruptError(f"{len(blob) - r.pos} trailing bytes after last tensor")
    return header, records


_BOOL = {"true": True, "false": False}


def _config_from_header(header: dict[str, str]) -> VitConfig:
    values = {}
    for f in fields(VitConfig):
        key = f"config.{f.name}"
        if key not in header:
            raise CheckpointCorruptError(f"header lacks {key}")
        raw = header[key]
        if f.type in ("bool", bool):
            values[f.name] = _BOOL[raw]
        elif f.type in ("int", int):
            values[f.name] = int(raw)
        else:
            values[f.name] = float(raw)
    try:
        return VitConfig(**values)
    except (ValueError, KeyError) as exc:
        raise CheckpointCorruptError(f"invalid config in header: {exc}") from None


def load(path) -> LoadedCheckpoint:
    """Rebuild a model; ternary checkpoints come back frozen and inference-only."""
    blob = Path(path).read_bytes()
    header, records = read_records(blob)
    kind = header.get("kind")
    if kind not in ("latent", "ternary"):
        raise CheckpointFormatError(f"unknown checkpoint kind {kind!r}")
    cfg = _config_from_header(header)
    if kind == "ternary" and not cfg.quantized:
        raise CheckpointCorruptError("ternary checkpoint of a non-quantized model")
    model = VitModel(cfg, seed=0)
    by_name = {rec.name: rec for rec in records}
    if len(by_name) != len(records):
        raise CheckpointCorruptError("duplicate tensor names")

    fp_targets = dict(model.named_parameters())
    encoder = dict(model.encoder_linears())
    expected = set(fp_targets) if kind == "latent" else {n for n in fp_targets if not n.startswith("blocks.")} | set(encoder)
    if set(by_name) != expected:
        missing = sorted(expected - set(by_name))
        extra = sorted(set(by_name) - expected)
        raise CheckpointCorruptError(f"tensor set mismatch; missing={missing[:3]} unexpected={extra[:3]}")

    fp_values = {}
    frozen = {}
    for name, rec in by_name.items():
        if kind == "ternary" and name in encoder:
            layer = encoder[name]
            want = (layer.out_features, layer.in_features)
            if rec.dtype != DTYPE_PACKED or rec.dims != want:
                raise CheckpointCorruptError(f"{name}: expected packed {want}, got dtype {rec.dtype} dims {rec.dims}")
            packed = PackedTrits.frombytes(rec.payload, *want)
            try:
                unpack(packed)
            except CorruptTritsError as exc:
                raise CheckpointCorruptError(f"{name}: {exc}") from None
            frozen[name] = TernaryWeight(packed, float(rec.beta))
        else:
            target = fp_targets[name]
            if rec.dtype != DTYPE_FP32 or rec.dims != target.shape:
                raise CheckpointCorruptError(f"{name}: expected fp32 {target.shape}, got dtype {rec.dtype} dims {rec.dims}")
            fp_values[name] = np.frombuffer(rec.payload, dtype="<f4").reshape(rec.dims).astype(np.float32)

    for name, value in fp_values.items():
        fp_targets[name].data = value
    if kind == "ternary":
        for block in model.blocks:
            for lname, layer in block.linears():
                full = layer.latent_weight.name
                setattr(block, lname, BitLinearLayer.from_frozen(frozen[full], cfg.quant_config, cfg.ln_eps, name=full))
    if "norm.mean" in header:
        model.norm_mean = [float(v) for v in header["norm.mean"].split(",")]
        model.norm_std = [float(v) for v in header["norm.std"].split(",")]
    return LoadedCheckpoint(model, kind, cfg, header)


def model_weight_entries(model: VitModel, ternary: bool = True) -> list[tuple[str, int, int, str]]:
    """``(name, n, m, precision)`` rows for :func:`packed_size_report`."""
    return weight_entries(model.cfg, ternary=ternary)
