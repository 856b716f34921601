"""Affine 8-bit quantization scheme, observers and fake quantization.

A real value r and its code q are related by r = S * (q - Z) with a
positive scale S and an integer zero-point Z in [0, 255]. Codes are
computed as q = clamp(round(r / S) + Z, 0, 255), the exact inverse of the
dequantization map. Rounding is half-away-from-zero everywhere.
"""
import math
from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, Tuple, Union

import numpy as np

from qdistill.exceptions import NumericError, QuantizationError, RequantizationError

logger = getLogger(__name__)

QMIN = 0
QMAX = 255
FIXED_POINT_BITS = 31
# FIXED_POINT_BITS + shift must stay below 63 for the int64 rounding shift
MAX_SHIFT = 31


def round_half_away(x):
    """Round to nearest, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor scale and zero-point."""

    scale: float
    zero_point: int

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX or int(self.zero_point) != self.zero_point:
            raise QuantizationError(f"zero-point {self.zero_point} outside [{QMIN}, {QMAX}]")

    @property
    def real_min(self) -> float:
        return self.scale * (QMIN - self.zero_point)

    @property
    def real_max(self) -> float:
        return self.scale * (QMAX - self.zero_point)


@dataclass(frozen=True)
class RequantMultiplier:
    """Fixed-point encoding of a real multiplier M = m0_fixed / 2**31 * 2**-shift."""

    m0_fixed: int
    shift: int

    def __post_init__(self):
        if not (1 << 30) <= self.m0_fixed < (1 << 31):
            raise QuantizationError(f"m0_fixed {self.m0_fixed} outside [2^30, 2^31)")
        if not 0 <= self.shift <= MAX_SHIFT:
            raise QuantizationError(f"shift must lie in [0, {MAX_SHIFT}], got {self.shift}")

    @property
    def real_value(self) -> float:
        return math.ldexp(self.m0_fixed, -(FIXED_POINT_BITS + self.shift))


def compute_qparams(min_val: float, max_val: float) -> QuantParams:
    """Derive (S, Z) for a real range, widened so it always contains 0."""
    if math.isnan(min_val) or math.isnan(max_val):
        raise NumericError("cannot derive quantization parameters from NaN")
    if min_val > max_val:
        raise QuantizationError(f"min {min_val} is greater than max {max_val}")
    lo = min(float(min_val), 0.0)
    hi = max(float(max_val), 0.0)
    if lo == hi:
        return QuantParams(scale=1.0, zero_point=0)
    scale = (hi - lo) / (QMAX - QMIN)
    zero_point = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale=scale, zero_point=zero_point)


def _unclamped_codes(r, qp: QuantParams) -> np.ndarray:
    return round_half_away(np.asarray(r, dtype=np.float64) / qp.scale) + qp.zero_point


def quantize(r, qp: QuantParams) -> Union[int, np.ndarray]:
    """Map reals to saturated 8-bit codes."""
    codes = np.clip(_unclamped_codes(r, qp), QMIN, QMAX).astype(np.uint8)
    if codes.ndim == 0:
        return int(codes)
    return codes


def dequantize(q, qp: QuantParams) -> Union[float, np.ndarray]:
    """r = S * (q - Z), evaluated in float64."""
    values = qp.scale * (np.asarray(q, dtype=np.int64) - qp.zero_point).astype(np.float64)
    if values.ndim == 0:
        return float(values)
    return values


def fake_quantize_with_mask(t: np.ndarray, qp: QuantParams) -> Tuple[np.ndarray, np.ndarray]:
    """Quantize-dequantize t; also return where the quantizer did not saturate."""
    codes = _unclamped_codes(t, qp)
    in_range = (codes >= QMIN) & (codes <= QMAX)
    out = qp.scale * (np.clip(codes, QMIN, QMAX) - qp.zero_point)
    return out.astype(np.asarray(t).dtype), in_range


def fake_quantize(t: np.ndarray, qp: QuantParams) -> np.ndarray:
    return fake_quantize_with_mask(t, qp)[0]


def fake_quantize_backward(grad: np.ndarray, in_range: np.ndarray) -> np.ndarray:
    """Clipped straight-through estimator: identity inside the range, zero where saturated."""
    return grad * in_range


@dataclass
class ObserverState:
    """Running min/max of a tensor stream; the range always includes 0."""

    running_min: float = 0.0
    running_max: float = 0.0
    frozen: bool = False
    sample_count: int = 0

    def qparams(self) -> QuantParams:
        return compute_qparams(self.running_min, self.running_max)


def observer_update(state: ObserverState, t: np.ndarray) -> ObserverState:
    """Fold the extrema of t into the observer unless it is frozen."""
    if state.frozen:
        return state
    t = np.asarray(t)
    state.running_min = min(state.running_min, float(t.min()), 0.0)
    state.running_max = max(state.running_max, float(t.max()), 0.0)
    state.sample_count += 1
    return state


@dataclass
class QATState:
    """Observers attached to a fused model: one for the input, one per compute layer."""

    input_observer: ObserverState = field(default_factory=ObserverState)
    observers: Dict[int, ObserverState] = field(default_factory=dict)

    def freeze(self) -> None:
        self.input_observer.frozen = True
        for observer in self.observers.values():
            observer.frozen = True

    @property
    def frozen(self) -> bool:
        return self.input_observer.frozen and all(o.frozen for o in self.observers.values())


def derive_requant_multiplier(s1: float, s2: float, s3: float) -> RequantMultiplier:
    """Encode M = s1 * s2 / s3 as a normalized fixed-point mantissa and a right shift."""
    if not (s1 > 0 and s2 > 0 and s3 > 0):
        raise QuantizationError(f"scales must be positive, got {s1}, {s2}, {s3}")
    multiplier = s1 * s2 / s3
    if multiplier >= 1.0:
        raise RequantizationError(
            f"requantization multiplier {multiplier:.6g} >= 1; recompute the output scale "
            f"from a wider observed range"
        )
    mantissa, exponent = math.frexp(multiplier)
    shift = -exponent
    m0_fixed = int(round_half_away(math.ldexp(mantissa, FIXED_POINT_BITS)))
    if m0_fixed == 1 << FIXED_POINT_BITS:
        m0_fixed >>= 1
        shift -= 1
    if shift < 0:
        raise RequantizationError(f"requantization multiplier {multiplier!r} rounds up to 1")
    if shift > MAX_SHIFT:
        raise RequantizationError(
            f"requantization multiplier {multiplier:.6g} < 2^-{MAX_SHIFT + 1} would map every accumulator "
            f"to the zero-point; the output scale is too wide for this layer"
        )
    return RequantMultiplier(m0_fixed=m0_fixed, shift=shift)
