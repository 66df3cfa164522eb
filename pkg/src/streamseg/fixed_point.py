"""
Bit-exact emulation of <T, I> fixed-point arithmetic.

A value is carried as an integer mantissa together with its format; the real
value is ``mantissa * 2**-frac``. Scalar routines work on Python ints (and
accept ``fractions.Fraction`` inputs for exact oracles); the ``*_array``
variants are the numpy equivalents used by the kernels and the sequential
reference evaluator, and must agree with the scalar ones element for element.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

ROUND_NEAREST_EVEN = "round_nearest_even"
TRUNCATE = "truncate"
SATURATE = "saturate"
WRAP = "wrap"

# numpy emulation keeps every mantissa and accumulator inside int64
MAX_EMULATED_BITS = 62

_FORMAT_RE = re.compile(r"^([su])(\d+)\.(\d+)((?::\w+)*)$")


class FixedPointError(ValueError):
    pass


class AccumulatorOverflow(ArithmeticError):
    """An accumulator left its declared range; the AccFormat was sized wrong."""


@dataclass(frozen=True)
class FxFormat:
    total_bits: int
    integer_bits: int
    signed: bool = True
    rounding: str = ROUND_NEAREST_EVEN
    overflow: str = SATURATE

    def __post_init__(self):
        if self.total_bits < 1:
            raise FixedPointError(f"total_bits must be >= 1, got {self.total_bits}")
        if self.integer_bits < 0:
            raise FixedPointError(f"integer_bits must be >= 0, got {self.integer_bits}")
        if self.frac_bits < 0:
            raise FixedPointError(f"{self}: no room left for fractional bits")
        if self.rounding not in (ROUND_NEAREST_EVEN, TRUNCATE):
            raise FixedPointError(f"unknown rounding mode {self.rounding!r}")
        if self.overflow not in (SATURATE, WRAP):
            raise FixedPointError(f"unknown overflow mode {self.overflow!r}")

    @property
    def frac_bits(self) -> int:
        return self.total_bits - self.integer_bits - (1 if self.signed else 0)

    @property
    def min_mantissa(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_mantissa(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    @property
    def step(self) -> Fraction:
        return Fraction(1, 1 << self.frac_bits)

    @property
    def min_value(self) -> Fraction:
        return self.min_mantissa * self.step

    @property
    def max_value(self) -> Fraction:
        return self.max_mantissa * self.step

    def with_policy(self, rounding: str | None = None, overflow: str | None = None) -> "FxFormat":
        return FxFormat(self.total_bits, self.integer_bits, self.signed,
                        rounding or self.rounding, overflow or self.overflow)

    def __str__(self):
        return format_string(self)


def hls_compat(fmt: FxFormat) -> FxFormat:
    """Truncate + wrap, matching the usual ap_fixed defaults."""
    return fmt.with_policy(TRUNCATE, WRAP)


def parse_format(text: str) -> FxFormat:
    """Parse ``"u8.0"``, ``"s16.6"`` and optional ``":trn"`` / ``":wrap"`` suffixes."""
    m = _FORMAT_RE.match(text.strip())
    if m is None:
        raise FixedPointError(f"bad format string {text!r}; expected e.g. 'u8.0' or 's16.6'")
    sign, total, integer, suffix = m.groups()
    rounding, overflow = ROUND_NEAREST_EVEN, SATURATE
    for flag in filter(None, suffix.split(":")):
        if flag in ("trn", "truncate"):
            rounding = TRUNCATE
        elif flag in ("rne", "round"):
            rounding = ROUND_NEAREST_EVEN
        elif flag == "wrap":
            overflow = WRAP
        elif flag in ("sat", "saturate"):
            overflow = SATURATE
        else:
            raise FixedPointError(f"unknown format flag {flag!r} in {text!r}")
    return FxFormat(int(total), int(integer), sign == "s", rounding, overflow)


def format_string(fmt: FxFormat) -> str:
    s = f"{'s' if fmt.signed else 'u'}{fmt.total_bits}.{fmt.integer_bits}"
    if fmt.rounding == TRUNCATE:
        s += ":trn"
    if fmt.overflow == WRAP:
        s += ":wrap"
    return s


@dataclass(frozen=True)
class FxValue:
    mantissa: int
    fmt: FxFormat

    def __post_init__(self):
        if not self.fmt.min_mantissa <= self.mantissa <= self.fmt.max_mantissa:
            raise FixedPointError(f"mantissa {self.mantissa} does not fit {self.fmt}")

    @property
    def exact(self) -> Fraction:
        return Fraction(self.mantissa, 1 << self.fmt.frac_bits)

    @property
    def value(self) -> float:
        return math.ldexp(self.mantissa, -self.fmt.frac_bits)


def _fit(m: int, fmt: FxFormat) -> int:
    lo, hi = fmt.min_mantissa, fmt.max_mantissa
    if lo <= m <= hi:
        return m
    if fmt.overflow == SATURATE:
        return hi if m > hi else lo
    return (m - lo) % (1 << fmt.total_bits) + lo


def _round_shift(acc: int, shift: int, rounding: str) -> int:
    # acc * 2**-shift rounded to an integer
    if shift <= 0:
        return acc << -shift
    if rounding == TRUNCATE:
        return acc >> shift
    q, r = divmod(acc, 1 << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def quantize(x, fmt: FxFormat) -> FxValue:
    """Nearest representable value of ``x`` under ``fmt``'s rounding/overflow policy.

    ``x`` may be any real number type; floats are scaled exactly (power-of-two
    multiply) so no double rounding occurs.
    """
    if isinstance(x, float):
        if math.isnan(x):
            raise FixedPointError("cannot quantize NaN")
        if math.isinf(x):
            m = fmt.max_mantissa if x > 0 else fmt.min_mantissa
            return FxValue(m, fmt)
        try:
            scaled = math.ldexp(x, fmt.frac_bits)
        except OverflowError:
            return quantize(Fraction(x), fmt)
        if scaled == math.floor(scaled):
            m = int(scaled)
        else:
            m = math.floor(scaled) if fmt.rounding == TRUNCATE else round(scaled)
    else:
        scaled = Fraction(x) * (1 << fmt.frac_bits)
        m = math.floor(scaled) if fmt.rounding == TRUNCATE else round(scaled)
    return FxValue(_fit(int(m), fmt), fmt)


def requantize(acc: int, src_frac: int, dst: FxFormat) -> FxValue:
    """Cast an integer carrying ``src_frac`` fractional bits into ``dst``."""
    m = _round_shift(int(acc), src_frac - dst.frac_bits, dst.rounding)
    return FxValue(_fit(m, dst), dst)


@dataclass(frozen=True)
class AccFormat:
    bits: int
    frac_bits: int

    @property
    def min_value(self) -> int:
        return -(1 << (self.bits - 1))

    @property
    def max_value(self) -> int:
        return (1 << (self.bits - 1)) - 1

    def check(self, acc: int) -> int:
        if not self.min_value <= acc <= self.max_value:
            raise AccumulatorOverflow(f"accumulator {acc} outside {self.bits}-bit range")
        return acc

    def check_array(self, acc: np.ndarray) -> np.ndarray:
        if acc.size and (acc.min() < self.min_value or acc.max() > self.max_value):
            raise AccumulatorOverflow(f"accumulator outside {self.bits}-bit range")
        return acc


def acc_format_for(weight_fmt: FxFormat, act_fmt: FxFormat, fan_in: int,
                   bias_fmt: FxFormat | None = None) -> AccFormat:
    """Widest-case signed accumulator for ``fan_in`` products plus an aligned bias."""
    frac = weight_fmt.frac_bits + act_fmt.frac_bits
    bits = weight_fmt.total_bits + act_fmt.total_bits + max(0, math.ceil(math.log2(fan_in)))
    if bias_fmt is not None:
        shift = frac - bias_fmt.frac_bits
        if shift < 0:
            raise FixedPointError(
                f"bias {bias_fmt} has more fractional bits than the accumulator ({frac})")
        bits = max(bits, bias_fmt.total_bits + shift)
    return AccFormat(bits + 1, frac)


def mac(acc: int, w: FxValue, a: FxValue, acc_fmt: AccFormat | None = None) -> int:
    acc = acc + w.mantissa * a.mantissa
    if acc_fmt is not None:
        acc_fmt.check(acc)
    return acc


def align_bias(bias_mantissa: int, bias_fmt: FxFormat, acc_frac: int) -> int:
    return bias_mantissa << (acc_frac - bias_fmt.frac_bits)


# -- numpy variants ---------------------------------------------------------

def _fit_array(m: np.ndarray, fmt: FxFormat) -> np.ndarray:
    lo, hi = fmt.min_mantissa, fmt.max_mantissa
    if fmt.overflow == SATURATE:
        return np.clip(m, lo, hi)
    return (m - lo) % (1 << fmt.total_bits) + lo


def quantize_array(x, fmt: FxFormat) -> np.ndarray:
    """Vectorised :func:`quantize`; returns int64 mantissas."""
    if fmt.total_bits > MAX_EMULATED_BITS:
        raise FixedPointError(f"{fmt} is wider than the {MAX_EMULATED_BITS}-bit emulation limit")
    x = np.asarray(x, dtype=np.float64)
    if np.isnan(x).any():
        raise FixedPointError("cannot quantize NaN")
    scaled = np.ldexp(x, fmt.frac_bits)
    scaled = np.floor(scaled) if fmt.rounding == TRUNCATE else np.rint(scaled)
    # keep the cast into int64 well-defined; only reachable far outside the range
    limit = float(2 ** MAX_EMULATED_BITS)
    scaled = np.clip(scaled, -limit, limit)
    return _fit_array(scaled.astype(np.int64), fmt)


def requantize_array(acc: np.ndarray, src_frac: int, dst: FxFormat) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    shift = src_frac - dst.frac_bits
    if shift <= 0:
        m = acc << -shift
    elif dst.rounding == TRUNCATE:
        m = acc >> shift
    else:
        q, r = np.divmod(acc, np.int64(1) << shift)
        half = np.int64(1) << (shift - 1)
        q = q + ((r > half) | ((r == half) & (q & 1 == 1)))
        m = q
    return _fit_array(m, dst)


def to_real(mantissas, fmt: FxFormat) -> np.ndarray:
    return np.ldexp(np.asarray(mantissas, dtype=np.float64), -fmt.frac_bits)


@dataclass(frozen=True, eq=False)
class FxTensor:
    """(channels, height, width) block of mantissas sharing one format."""

    mantissas: np.ndarray
    fmt: FxFormat

    def __post_init__(self):
        m = np.asarray(self.mantissas, dtype=np.int64)
        if m.ndim != 3:
            raise FixedPointError(f"FxTensor needs (C, H, W) data, got shape {m.shape}")
        if m.size and (m.min() < self.fmt.min_mantissa or m.max() > self.fmt.max_mantissa):
            raise FixedPointError(f"mantissas out of range for {self.fmt}")
        m.setflags(write=False)
        object.__setattr__(self, "mantissas", m)

    @classmethod
    def from_real(cls, x, fmt: FxFormat) -> "FxTensor":
        return cls(quantize_array(x, fmt), fmt)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.mantissas.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat channel-major mantissa array."""
        return self.mantissas.reshape(-1)

    def values(self) -> np.ndarray:
        return to_real(self.mantissas, self.fmt)

    def __eq__(self, other):
        if not isinstance(other, FxTensor):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.mantissas, other.mantissas)

    def __repr__(self):
        return f"FxTensor(shape={self.shape}, fmt={self.fmt})"
