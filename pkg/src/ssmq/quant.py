"""Scalar/tensor quantization primitives.

Symmetric uniform round-and-clamp quantization with static scales is the
workhorse; scale computation comes in abs-max and percentile-max flavors.
The variant quantizers (dynamic min-max, log2, asymmetric percentile) exist
for comparison studies and are not used on the main model path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

# Scale floor for all-zero tensors: keeps scales positive while dequantized
# values stay exactly zero.
SCALE_FLOOR = 1e-8

# Percentile that works well for scan-input clipping; used as the default
# everywhere a percentile parameter is accepted.
DEFAULT_PERCENTILE = 99.999


class SchemeKind(str, Enum):
    STATIC_SYMMETRIC_MAX = "static_symmetric_max"
    STATIC_SYMMETRIC_PERCENTILE = "static_symmetric_percentile"
    DYNAMIC_SYMMETRIC_MAX = "dynamic_symmetric_max"
    STATIC_LOG2 = "static_log2"
    STATIC_ASYMMETRIC_PERCENTILE = "static_asymmetric_percentile"


_PERCENTILE_KINDS = (
    SchemeKind.STATIC_SYMMETRIC_PERCENTILE,
    SchemeKind.STATIC_ASYMMETRIC_PERCENTILE,
)


@dataclass(frozen=True)
class QuantScheme:
    """One quantization scheme: a variant tag plus its percentile when needed."""

    kind: SchemeKind
    p: float | None = None

    def __post_init__(self):
        if self.kind in _PERCENTILE_KINDS:
            if self.p is None or not (0.0 < self.p <= 100.0):
                raise ValueError(f"percentile scheme requires p in (0, 100], got {self.p}")
        elif self.p is not None:
            raise ValueError(f"scheme {self.kind.value} does not take a percentile")

    @property
    def symmetric(self) -> bool:
        return self.kind != SchemeKind.STATIC_ASYMMETRIC_PERCENTILE


def qmax(bit_width: int) -> int:
    return 2 ** (bit_width - 1) - 1


def qmin(bit_width: int) -> int:
    return -(2 ** (bit_width - 1))


def _int_dtype(bit_width: int):
    if bit_width <= 8:
        return np.int8
    if bit_width <= 16:
        return np.int16
    return np.int32


@dataclass(frozen=True)
class QTensor:
    """Integer-valued tensor with a static scale (and optional zero point)."""

    values: np.ndarray
    scale: float
    zero_point: int = 0
    bit_width: int = 8

    def __post_init__(self):
        if self.bit_width < 2:
            raise ValueError(f"bit width must be >= 2, got {self.bit_width}")
        if not (self.scale > 0.0):
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.issubdtype(self.values.dtype, np.integer):
            raise ValueError("QTensor values must be integers")
        lo, hi = qmin(self.bit_width), qmax(self.bit_width)
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise ValueError(f"values outside representable range [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def compute_scale_absmax(x, bit_width: int = 8) -> float:
    """Abs-max scale: max(|x|) / (2^(N-1) - 1), floored for all-zero tensors."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty calibration tensor")
    if bit_width < 2:
        raise ValueError("bit width must be >= 2")
    m = float(np.max(np.abs(arr)))
    if m == 0.0:
        return SCALE_FLOOR
    return m / qmax(bit_width)


def nearest_rank(values, p: float) -> float:
    """Nearest-rank percentile: sorted(values)[ceil((p/100)*n) - 1].

    The rank is computed with exact rational arithmetic so that e.g. p=99 on
    1000 values selects index 989 regardless of binary rounding of p/100.
    """
    arr = np.sort(np.asarray(values, dtype=np.float64), axis=None)
    n = arr.size
    if n == 0:
        raise ValueError("empty calibration tensor")
    if not (0.0 < p <= 100.0):
        raise ValueError(f"percentile must lie in (0, 100], got {p}")
    rank = math.ceil(Fraction(p) * n / 100)
    idx = min(max(rank - 1, 0), n - 1)
    return float(arr[idx])


def compute_scale_percentile(pooled_abs, p: float, bit_width: int = 8) -> float:
    """Percentile-max scale over pooled absolute values; p=100 is abs-max."""
    v = nearest_rank(pooled_abs, p)
    if v < 0.0:
        raise ValueError("pooled absolute values must be non-negative")
    if v == 0.0:
        # Same floor rule as the abs-max scale.
        return SCALE_FLOOR
    return v / qmax(bit_width)


def quantize(x, scale: float, bit_width: int = 8) -> QTensor:
    """Symmetric round-and-clamp: clamp(rint(x/s), -(2^(N-1)-1), 2^(N-1)-1).

    Rounding is half-to-even.  The clamp range is symmetric so saturated
    values land exactly on +/-(2^(N-1)-1).
    """
    arr = np.asarray(x)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite activation")
    if not (scale > 0.0):
        raise ValueError(f"scale must be positive, got {scale}")
    hi = qmax(bit_width)
    q = np.clip(np.rint(arr / scale), -hi, hi)
    return QTensor(q.astype(_int_dtype(bit_width)), float(scale), 0, bit_width)


def dequantize(q: QTensor, dtype=np.float32) -> np.ndarray:
    """(values - zero_point) * scale, elementwise."""
    vals = q.values.astype(np.float64)
    if q.zero_point:
        vals = vals - q.zero_point
    return (vals * q.scale).astype(dtype)


def quantize_dynamic(x, bit_width: int = 8) -> QTensor:
    """Symmetric quantization with a per-call abs-max scale (no static state)."""
    return quantize(x, compute_scale_absmax(x, bit_width), bit_width)


@dataclass(frozen=True)
class Log2QTensor:
    """Power-of-two quantization record: per-element sign and exponent."""

    signs: np.ndarray      # int8 in {-1, 0, +1}
    exponents: np.ndarray  # int16; meaningful only where sign != 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.signs.shape

    def dequantize(self, dtype=np.float64) -> np.ndarray:
        out = np.ldexp(self.signs.astype(np.float64), self.exponents.astype(np.int64))
        return out.astype(dtype)


def quantize_log2(x) -> Log2QTensor:
    """Map each element to the nearest signed power of two (ties round up in magnitude)."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite activation")
    signs = np.sign(arr).astype(np.int8)
    mag = np.abs(arr)
    # |x| = m * 2^e with m in [0.5, 1)  =>  |x| = (2m) * 2^(e-1), 2m in [1, 2).
    m, e = np.frexp(mag)
    exponents = (e - 1).astype(np.int16)
    exponents = np.where(2.0 * m >= 1.5, exponents + 1, exponents)
    exponents = np.where(signs == 0, np.int16(0), exponents).astype(np.int16)
    return Log2QTensor(signs, exponents)


def quantize_asymmetric_percentile(x, p: float, bit_width: int = 8) -> QTensor:
    """Asymmetric quantization with percentile-clipped range.

    hi is the nearest-rank p-th percentile of x and lo its mirror (the negated
    p-th percentile of -x); the zero point shifts the clipped range onto the
    signed integer grid.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("non-finite activation")
    hi = nearest_rank(arr, p)
    lo = -nearest_rank(-arr, p)
    if hi <= lo:
        raise ValueError("degenerate range")
    levels = 2**bit_width - 1
    scale = (hi - lo) / levels
    zero_point = int(np.rint(-lo / scale)) - 2 ** (bit_width - 1)
    q = np.clip(np.rint(arr / scale) + zero_point, qmin(bit_width), qmax(bit_width))
    return QTensor(q.astype(_int_dtype(bit_width)), float(scale), zero_point, bit_width)
