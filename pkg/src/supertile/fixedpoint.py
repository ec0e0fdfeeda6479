"""16-bit dynamic-precision fixed point and the 48-bit accumulator contract."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

INT16_MIN = -(1 << 15)
INT16_MAX = (1 << 15) - 1
ACC_BITS = 48
ACC_MIN = -(1 << (ACC_BITS - 1))
ACC_MAX = (1 << (ACC_BITS - 1)) - 1

# longest product chain one accumulator ever sees:
# 32 channels x 49 window taps x 16 fused kernels per slice pass
MAX_PRODUCTS_PER_PASS = 32 * 49 * 16
assert INT16_MIN * INT16_MIN * MAX_PRODUCTS_PER_PASS < (1 << 47)
assert INT16_MAX * INT16_MAX * MAX_PRODUCTS_PER_PASS < (1 << 47)


class AccumulatorOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class QFormat:
    frac_bits: int

    def __post_init__(self):
        if not 0 <= self.frac_bits <= 15:
            raise ValueError(f"frac_bits must be in [0, 15], got {self.frac_bits}")

    @property
    def scale(self) -> float:
        return 2.0 ** -self.frac_bits

    def __str__(self):
        return f"Q{15 - self.frac_bits}.{self.frac_bits}"


@dataclass
class QTensor:
    """int16 tensor in NCHW order with one fraction-bit count for the whole tensor."""

    data: np.ndarray
    qformat: QFormat

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.int16:
            if self.data.size and (self.data.min() < INT16_MIN or self.data.max() > INT16_MAX):
                raise ValueError("QTensor data outside int16 range")
            self.data = self.data.astype(np.int16)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def to_float(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.qformat.scale

    def __eq__(self, other):
        if not isinstance(other, QTensor):
            return NotImplemented
        return (self.qformat == other.qformat and self.data.shape == other.data.shape
                and bool(np.array_equal(self.data, other.data)))


@dataclass
class Accumulator:
    """Signed 48-bit accumulator that records overflow instead of wrapping."""

    value: int = 0
    overflow: bool = False

    def add(self, x: int) -> "Accumulator":
        v = self.value + int(x)
        if not ACC_MIN <= v <= ACC_MAX:
            self.overflow = True
        self.value = v
        return self

    def mac(self, a: int, b: int) -> "Accumulator":
        return self.add(int(a) * int(b))


def fits_acc(v) -> bool:
    v = np.asarray(v)
    if v.size == 0:
        return True
    return bool(v.min() >= ACC_MIN and v.max() <= ACC_MAX)


def check_acc(v, where: str = "accumulator"):
    if not fits_acc(v):
        raise AccumulatorOverflow(f"{where}: value exceeds {ACC_BITS}-bit range")
    return v


def saturate(v):
    return np.clip(v, INT16_MIN, INT16_MAX)


def quantize_array(x, q: QFormat) -> np.ndarray:
    # np.rint is round-half-to-even
    x = np.asarray(x, dtype=np.float64)
    return saturate(np.rint(x * (1 << q.frac_bits))).astype(np.int16)


def quantize(x: float, q: QFormat) -> int:
    return int(quantize_array(np.float64(x), q))


def dequantize(v: int, q: QFormat) -> float:
    return float(v) * 2.0 ** -q.frac_bits


def choose_qformat(values) -> QFormat:
    """Pick the fraction width with the least total squared error.

    Saturation is part of the error. Ties go to the larger fraction width.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("choose_qformat needs at least one value")
    if not np.all(np.isfinite(x)):
        raise ValueError("choose_qformat needs finite values")
    best, best_err = 15, None
    for frac in range(15, -1, -1):
        q = QFormat(frac)
        err = float(np.sum((quantize_array(x, q).astype(np.float64) * q.scale - x) ** 2))
        if best_err is None or err < best_err:
            best, best_err = frac, err
    return QFormat(best)


def shift_round(v, shift: int):
    """Arithmetic right shift by ``shift`` with round-half-to-even; left shift if negative.

    Works on python ints and int64 arrays.
    """
    if shift <= 0:
        return v * (1 << -shift) if isinstance(v, np.ndarray) else int(v) << -shift
    if isinstance(v, np.ndarray):
        v = v.astype(np.int64)
        q = v >> shift
        r = v - (q << shift)
        half = 1 << (shift - 1)
        up = (r > half) | ((r == half) & ((q & 1) == 1))
        return q + up.astype(np.int64)
    v = int(v)
    q = v >> shift
    r = v - (q << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def requantize_with_flag(acc, in_frac: int, out_q: QFormat) -> tuple[int, bool]:
    v = acc.value if isinstance(acc, Accumulator) else int(acc)
    overflow = (isinstance(acc, Accumulator) and acc.overflow) or not ACC_MIN <= v <= ACC_MAX
    r = shift_round(v, in_frac - out_q.frac_bits)
    return max(INT16_MIN, min(INT16_MAX, r)), overflow


def requantize(acc, in_frac: int, out_q: QFormat) -> int:
    """Shift-round-saturate an accumulator to ``out_q``; raises on 48-bit overflow."""
    r, overflow = requantize_with_flag(acc, in_frac, out_q)
    if overflow:
        raise AccumulatorOverflow(f"accumulator {acc} exceeds {ACC_BITS} bits")
    return r


def requantize_array(acc: np.ndarray, in_frac: int, out_frac: int) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    check_acc(acc, "requantize")
    return saturate(shift_round(acc, in_frac - out_frac)).astype(np.int16)


def align(v: np.ndarray, frac: int, target_frac: int) -> np.ndarray:
    """Left-shift ``v`` from ``frac`` up to ``target_frac`` (never rounds)."""
    if target_frac < frac:
        raise ValueError("align only shifts left")
    return np.asarray(v, dtype=np.int64) << (target_frac - frac)
