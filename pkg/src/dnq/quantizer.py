"""Uniform asymmetric affine quantization.

The quantizer maps real values onto a q-bit integer grid through a scale s
and an integer zero-point z:

    x_int = clip(round(x / s) + z, 0, 2^q - 1)
    x_hat = (x_int - z) * s

Calibration is plain min-max, with the observed range extended to include
zero before fitting:

    lo = min(x_min, 0),  hi = max(x_max, 0)
    s  = (hi - lo) / (2^q - 1)
    z  = round(q_max - hi / s),  q_max = 2^q - 1

Zero-extension guarantees z lands inside [0, q_max] (so real zero is exactly
representable) and that the representable interval covers the calibrated
data, which keeps the reconstruction error of in-range values within s/2.

Rounding ties go half-away-from-zero everywhere, so integer results are
reproducible bit-for-bit across platforms.  Granularity is either per-tensor
or per-channel along a designated axis (weights use the output-channel axis,
activations are per-tensor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autograd import as_array

# Scale floor for degenerate (all-zero) groups; reconstruction error stays
# below this floor by construction.
DEGENERATE_SCALE = 2.0 ** -16

SUPPORTED_BITS = (2, 3, 4, 8)


class CalibrationError(ValueError):
    """Raised when calibration inputs are unusable (empty tensor, bad axis)."""


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (np.round ties to even)."""
    x = np.asarray(x)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Affine grid parameters: positive scale(s), integer zero-point(s).

    ``axis`` is None for per-tensor granularity, otherwise the channel axis
    the per-channel vectors index.
    """

    scale: np.ndarray       # float32, shape [C] or scalar ()
    zero_point: np.ndarray  # int64, same shape as scale
    bits: int
    axis: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float32))
        object.__setattr__(self, "zero_point", np.asarray(self.zero_point, dtype=np.int64))
        if np.any(self.scale <= 0):
            raise ValueError("scale must be positive")
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bit-width {self.bits} not in {SUPPORTED_BITS}")
        if np.any(self.zero_point < 0) or np.any(self.zero_point > self.q_max):
            raise ValueError("zero-point outside the integer grid")

    @property
    def q_max(self) -> int:
        return (1 << self.bits) - 1

    def _bcast(self, ndim: int) -> Tuple[np.ndarray, np.ndarray]:
        """scale/zero-point shaped for broadcasting against rank-ndim data."""
        if self.axis is None:
            return self.scale, self.zero_point
        shape = [1] * ndim
        shape[self.axis] = -1
        return self.scale.reshape(shape), self.zero_point.reshape(shape)


def calibrate_minmax(x, bits: int, axis: Optional[int] = None) -> QuantParams:
    """Fit (s, z) to the zero-extended min-max range of ``x``.

    ``axis`` selects per-channel granularity; statistics are then taken over
    all remaining axes per channel.  Degenerate groups (everything exactly
    zero) fall back to a floor scale with a mid-grid zero-point.
    """
    arr = as_array(x, np.float64)
    if arr.size == 0:
        raise CalibrationError("cannot calibrate an empty tensor")
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bit-width {bits} not in {SUPPORTED_BITS}")
    q_max = (1 << bits) - 1

    if axis is None:
        x_min = np.asarray(arr.min())
        x_max = np.asarray(arr.max())
    else:
        if not (-arr.ndim <= axis < arr.ndim):
            raise CalibrationError(f"axis {axis} out of range for rank-{arr.ndim} tensor")
        axis = axis % arr.ndim
        reduce_axes = tuple(i for i in range(arr.ndim) if i != axis)
        x_min = arr.min(axis=reduce_axes)
        x_max = arr.max(axis=reduce_axes)

    lo = np.minimum(x_min, 0.0)
    hi = np.maximum(x_max, 0.0)
    degenerate = hi == lo  # only possible when the whole group is zero

    scale = np.where(degenerate, DEGENERATE_SCALE, (hi - lo) / q_max)
    zp = round_half_away(q_max - hi / scale)
    zp = np.where(degenerate, 1 << (bits - 1), zp)
    zp = np.clip(zp, 0, q_max)  # provably a no-op after zero-extension
    return QuantParams(scale.astype(np.float32), zp.astype(np.int64), bits, axis)


def quantize(x, qp: QuantParams) -> np.ndarray:
    """Map real values to grid integers: clip(round(x/s) + z, 0, q_max)."""
    arr = as_array(x, np.float64)
    s, z = qp._bcast(arr.ndim)
    ints = round_half_away(arr / s.astype(np.float64)) + z
    return np.clip(ints, 0, qp.q_max).astype(np.int64)


def dequantize(x_int: np.ndarray, qp: QuantParams, dtype=np.float32) -> np.ndarray:
    s, z = qp._bcast(np.asarray(x_int).ndim)
    return ((np.asarray(x_int) - z) * s.astype(np.float64)).astype(dtype)


def fake_quantize(x, qp: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize; output is restricted to the grid.

    Idempotent: applying it twice with the same params is bit-exact, because
    every output value k*s recovers its integer k under round-to-nearest.
    Preserves the floating dtype of the input (float64 analysis paths stay
    float64).
    """
    arr = np.asarray(x)  # Tensor exposes __array__
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return dequantize(quantize(arr, qp), qp, dtype=dtype)
