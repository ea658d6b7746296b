"""16-bit fixed-point arithmetic with exact wide accumulation.

All codes are signed 16-bit integers interpreted as ``code * 2**-frac_bits``.
Products of two codes are summed exactly in integer arithmetic, so the order
in which partial sums arrive never changes a result. Rounding is always
round-half-to-even and every narrowing operation saturates instead of
wrapping; saturations are tallied in an optional :class:`SaturationCounter`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

WORD_BITS = 16
CODE_MIN = -(1 << (WORD_BITS - 1))
CODE_MAX = (1 << (WORD_BITS - 1)) - 1
ACC_MIN = -(1 << 63)
ACC_MAX = (1 << 63) - 1


class FormatMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class QFormat:
    """Q-format of a 16-bit word: ``frac_bits`` fractional bits."""

    frac_bits: int
    total_bits: int = WORD_BITS

    def __post_init__(self):
        if self.total_bits != WORD_BITS:
            raise ValueError(f"only {WORD_BITS}-bit words are supported, got {self.total_bits}")
        if not 0 <= self.frac_bits <= WORD_BITS - 1:
            raise ValueError(f"frac_bits must be in [0, {WORD_BITS - 1}], got {self.frac_bits}")

    @property
    def scale(self) -> float:
        return 2.0 ** self.frac_bits

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return CODE_MIN * self.lsb

    @property
    def max_value(self) -> float:
        return CODE_MAX * self.lsb

    def __str__(self) -> str:
        return f"Q{self.total_bits - self.frac_bits}.{self.frac_bits}"


class SaturationCounter:
    """Mutable tally of saturation events; one per caller, never global."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


@dataclass(frozen=True)
class FxScalar:
    code: int
    fmt: QFormat

    def __post_init__(self):
        if not CODE_MIN <= self.code <= CODE_MAX:
            raise ValueError(f"code {self.code} outside 16-bit range")

    @property
    def value(self) -> float:
        return self.code * self.fmt.lsb


@dataclass(frozen=True)
class WideAccumulator:
    """Exact sum of code products, in units of ``2**-frac_bits``."""

    acc: int
    frac_bits: int

    def __post_init__(self):
        if not ACC_MIN <= self.acc <= ACC_MAX:
            raise OverflowError(f"accumulator {self.acc} exceeds signed 64-bit range")

    @property
    def value(self) -> float:
        return math.ldexp(self.acc, -self.frac_bits)

    def __add__(self, other: WideAccumulator) -> WideAccumulator:
        if other.frac_bits != self.frac_bits:
            raise FormatMismatchError(
                f"cannot add accumulators with {self.frac_bits} and {other.frac_bits} fractional bits")
        return WideAccumulator(self.acc + other.acc, self.frac_bits)


def _saturate(code: int, counter: Optional[SaturationCounter]) -> int:
    if code > CODE_MAX:
        if counter is not None:
            counter.add(1)
        return CODE_MAX
    if code < CODE_MIN:
        if counter is not None:
            counter.add(1)
        return CODE_MIN
    return code


def quantize(x: float, fmt: QFormat, counter: Optional[SaturationCounter] = None) -> FxScalar:
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x!r}")
    # scaling by a power of two is exact, so round() sees the true product
    return FxScalar(_saturate(round(x * fmt.scale), counter), fmt)


def round_shift(acc: int, shift: int) -> int:
    """``acc / 2**shift`` rounded half-to-even, in pure integer arithmetic."""
    if shift <= 0:
        return acc << -shift
    q = acc >> shift
    rem = acc - (q << shift)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and q & 1):
        q += 1
    return q


def requantize(acc: WideAccumulator, fmt: QFormat,
               counter: Optional[SaturationCounter] = None) -> FxScalar:
    code = round_shift(acc.acc, acc.frac_bits - fmt.frac_bits)
    return FxScalar(_saturate(code, counter), fmt)


def _common_format(values: Sequence[FxScalar], what: str) -> Optional[QFormat]:
    fmts = {v.fmt for v in values}
    if len(fmts) > 1:
        raise FormatMismatchError(f"{what} mix Q-formats: {sorted(map(str, fmts))}")
    return next(iter(fmts), None)


def fx_dot(weights: Sequence[FxScalar], inputs: Sequence[FxScalar]) -> WideAccumulator:
    """Exact dot product of two fixed-point vectors.

    Each operand must use one Q-format throughout; the accumulator carries
    the sum of the two operands' fractional bits.
    """
    if len(weights) != len(inputs):
        raise ValueError(f"length mismatch: {len(weights)} weights vs {len(inputs)} inputs")
    fw = _common_format(weights, "weights")
    fx = _common_format(inputs, "inputs")
    if fw is None:
        return WideAccumulator(0, 0)
    total = sum(w.code * x.code for w, x in zip(weights, inputs))
    return WideAccumulator(total, fw.frac_bits + fx.frac_bits)


def calibrate_format(values: Iterable[float] | np.ndarray, eps: float = 2.0 ** -20) -> QFormat:
    """Widest-fraction Q-format that holds ``max |v|`` without saturating."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("cannot calibrate a Q-format from an empty sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot calibrate a Q-format from non-finite values")
    peak = float(np.max(np.abs(arr)))
    frac = 15 - math.ceil(math.log2(peak + eps))
    frac = min(max(frac, 0), 15)
    # guard the half-LSB rounding edge just below a power of two
    while frac > 0 and round(peak * 2.0 ** frac) > CODE_MAX:
        frac -= 1
    return QFormat(frac)


# -- vectorized twins used by the golden model and the simulator ------------

def quantize_array(x: np.ndarray, fmt: QFormat,
                   counter: Optional[SaturationCounter] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    codes = np.rint(x * fmt.scale)  # rint rounds half to even
    sat = (codes > CODE_MAX) | (codes < CODE_MIN)
    if counter is not None:
        counter.add(np.count_nonzero(sat))
    return np.clip(codes, CODE_MIN, CODE_MAX).astype(np.int64)


def dequantize(codes: np.ndarray | int, fmt: QFormat) -> np.ndarray | float:
    return np.asarray(codes, dtype=np.float64) * fmt.lsb


def round_shift_array(acc: np.ndarray, shift: int) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    if shift <= 0:
        return acc << -shift
    q = acc >> shift
    rem = acc - (q << shift)
    half = np.int64(1) << (shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def requantize_array(acc: np.ndarray, acc_frac_bits: int, fmt: QFormat,
                     counter: Optional[SaturationCounter] = None) -> np.ndarray:
    codes = round_shift_array(acc, acc_frac_bits - fmt.frac_bits)
    sat = (codes > CODE_MAX) | (codes < CODE_MIN)
    if counter is not None:
        counter.add(np.count_nonzero(sat))
    return np.clip(codes, CODE_MIN, CODE_MAX)
