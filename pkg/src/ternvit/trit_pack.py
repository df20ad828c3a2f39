"""Base-3 trit packing and the multiplication-free ternary x int8 kernel.

Each byte holds five trits ``t`` as digits ``d = t + 1`` in little-endian
base 3: ``byte = d0 + 3*d1 + 9*d2 + 27*d3 + 81*d4`` (so at most 242).  Rows
are padded independently to a multiple of five columns with zero trits
(digit 1), which makes a packed ``n x m`` matrix exactly ``n * ceil(m/5)``
bytes, 1.6 bits per weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

from .tensor import ShapeError

__all__ = [
    "CorruptTritsError",
    "OpCounter",
    "PackedTrits",
    "SizeReport",
    "pack",
    "packed_row_bytes",
    "packed_size_report",
    "ternary_matmul",
    "unpack",
]

TRITS_PER_BYTE = 5
MAX_BYTE = 3**TRITS_PER_BYTE - 1  # 242
_POWERS = np.array([1, 3, 9, 27, 81], dtype=np.uint8)

# digits for every possible byte value, shape (243, 5)
_DIGITS = np.array(
    [[(v // 3**i) % 3 for i in range(TRITS_PER_BYTE)] for v in range(MAX_BYTE + 1)],
    dtype=np.int8,
)
_TRITS_LUT = _DIGITS - 1


class CorruptTritsError(ValueError):
    """Packed payload contains a byte that cannot encode five trits."""


def packed_row_bytes(m: int) -> int:
    return math.ceil(m / TRITS_PER_BYTE)


@dataclass(frozen=True, eq=False)
class PackedTrits:
    """Packed ``n x m`` ternary matrix; ``data`` is uint8 of shape ``(n, ceil(m/5))``."""

    n: int
    m: int
    data: np.ndarray

    def __post_init__(self):
        expected = (self.n, packed_row_bytes(self.m))
        if self.data.dtype != np.uint8 or self.data.shape != expected:
            raise ShapeError(
                f"packed payload must be uint8 {expected}, got {self.data.dtype} {self.data.shape}"
            )

    @property
    def nbytes(self) -> int:
        return self.data.size

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    @classmethod
    def frombytes(cls, buf: bytes, n: int, m: int) -> "PackedTrits":
        need = n * packed_row_bytes(m)
        if len(buf) != need:
            raise CorruptTritsError(f"expected {need} packed bytes for {n}x{m}, got {len(buf)}")
        arr = np.frombuffer(buf, dtype=np.uint8).reshape(n, packed_row_bytes(m)).copy()
        return cls(n, m, arr)

    def __eq__(self, other):
        if not isinstance(other, PackedTrits):
            return NotImplemented
        return self.n == other.n and self.m == other.m and np.array_equal(self.data, other.data)

    @cached_property
    def _plan(self) -> "_KernelPlan":
        return _build_plan(unpack(self))


def pack(trits) -> PackedTrits:
    """Pack an ``n x m`` array of values in {-1, 0, 1}."""
    t = np.asarray(trits)
    if t.ndim != 2:
        raise ShapeError(f"pack expects a matrix, got shape {t.shape}")
    bad = ~np.isin(t, (-1, 0, 1))
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ValueError(f"non-ternary value {t[i, j]!r} at position ({i}, {j})")
    n, m = t.shape
    cols = packed_row_bytes(m)
    digits = np.ones((n, cols * TRITS_PER_BYTE), dtype=np.uint8)
    digits[:, :m] = (t + 1).astype(np.uint8)
    data = (digits.reshape(n, cols, TRITS_PER_BYTE) * _POWERS).sum(axis=2, dtype=np.uint16)
    return PackedTrits(n, m, data.astype(np.uint8))


def unpack(p: PackedTrits) -> np.ndarray:
    """Inverse of :func:`pack`, returned as int8."""
    if p.data.size and int(p.data.max()) > MAX_BYTE:
        r, c = np.argwhere(p.data > MAX_BYTE)[0]
        raise CorruptTritsError(f"byte value {p.data[r, c]} at ({r}, {c}) exceeds {MAX_BYTE}")
    full = _TRITS_LUT[p.data].reshape(p.n, -1)
    return np.ascontiguousarray(full[:, : p.m])


@dataclass
class OpCounter:
    adds: int = 0
    subs: int = 0
    mults: int = 0

    @property
    def total(self) -> int:
        return self.adds + self.subs + self.mults


class _KernelPlan(NamedTuple):
    # per output row: columns with +1 trits, then columns with -1 trits (offset by m)
    gather: np.ndarray
    starts: np.ndarray  # segment starts of the rows listed in ``rows``
    rows: np.ndarray  # output rows with at least one nonzero trit
    n_pos: int
    n_neg: int


def _build_plan(trits: np.ndarray) -> _KernelPlan:
    n, m = trits.shape
    pieces = []
    lengths = np.zeros(n, dtype=np.int64)
    for i in range(n):
        row = trits[i]
        idx = np.concatenate([np.flatnonzero(row == 1), np.flatnonzero(row == -1) + m])
        pieces.append(idx)
        lengths[i] = idx.size
    gather = np.concatenate(pieces) if pieces else np.zeros(0, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(np.int64)
    rows = np.flatnonzero(lengths)
    return _KernelPlan(
        gather.astype(np.intp),
        starts[rows],
        rows,
        int((trits == 1).sum()),
        int((trits == -1).sum()),
    )


def ternary_matmul(
    p: PackedTrits,
    codes,
    counter: OpCounter | None = None,
    chunk_elems: int = 1 << 22,
) -> np.ndarray:
    """``out[r, i] = sum_j trit[i, j] * codes[r, j]`` using only adds and subtracts.

    ``codes`` is ``t x m`` (extra leading axes are flattened and restored).
    Each +1 trit adds the matching code, each -1 trit adds its negation, and
    zero trits are skipped.  Accumulation is int32; with ``|code| <= 127``
    this cannot overflow for ``m <= 2**24``.
    """
    c = np.asarray(codes)
    if c.shape[-1] != p.m:
        raise ShapeError(f"ternary_matmul shape mismatch: weights {p.n}x{p.m}, codes {c.shape}")
    lead = c.shape[:-1]
    c = c.reshape(-1, p.m).astype(np.int32)
    t = c.shape[0]
    plan = p._plan
    out = np.zeros((t, p.n), dtype=np.int32)
    nnz = plan.gather.size
    if nnz and t:
        signed = np.concatenate([c, np.negative(c)], axis=1)
        step = max(1, chunk_elems // nnz)
        for r0 in range(0, t, step):
            picked = signed[r0 : r0 + step][:, plan.gather]
            out[r0 : r0 + step, plan.rows] = np.add.reduceat(picked, plan.starts, axis=1, dtype=np.int32)
    if counter is not None:
        counter.adds += plan.n_pos * t
        counter.subs += plan.n_neg * t
    return out.reshape(*lead, p.n)


@dataclass
class SizeReport:
    entries: list[dict]
    fp32_bytes: int
    packed_bytes: int

    @property
    def ratio(self) -> float | None:
        return self.fp32_bytes / self.packed_bytes if self.packed_bytes else None

    def format(self) -> str:
        ratio = "n/a" if self.ratio is None else f"{self.ratio:.3f}"
        return f"fp32_bytes={self.fp32_bytes} packed_bytes={self.packed_bytes} ratio={ratio}"


def packed_size_report(weights: Iterable[tuple[str, int, int, str]]) -> SizeReport:
    """Storage cost of a weight set stored fp32 vs with ternary matrices packed.

    Each entry is ``(name, n, m, precision)`` with precision ``"ternary"`` or
    ``"fp32"``.  A ternary matrix costs ``n * ceil(m/5)`` payload bytes plus a
    4-byte beta; fp32 entries cost ``4 * n * m`` either way.
    """
    entries = []
    fp_total = packed_total = 0
    for name, n, m, precision in weights:
        fp = 4 * n * m
        if precision == "ternary":
            packed = n * packed_row_bytes(m) + 4
        elif precision == "fp32":
            packed = fp
        else:
            raise ValueError(f"unknown precision {precision!r} for {name}")
        entries.append({"name": name, "n": n, "m": m, "precision": precision, "fp32_bytes": fp, "packed_bytes": packed})
        fp_total += fp
        packed_total += packed
    return SizeReport(entries, fp_total, packed_total)
