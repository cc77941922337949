# numerics.py
"""
Reduced-precision emulation and the scalar primitives shared by every module.

Every array lives in an FP64 carrier. A value "in BF16" is an FP64 value that
lies exactly on the BF16 grid; emulated arithmetic quantizes its inputs,
computes in FP64 and quantizes the result.
"""

import logging
import threading
import weakref
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from errors import NumericsError

logger = logging.getLogger(__name__)

SOFTPLUS_LINEAR_THRESHOLD = 30.0


class NumericFormat(str, Enum):
    FP16 = "fp16"
    BF16 = "bf16"
    FP32 = "fp32"
    FP64 = "fp64"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]


_ITEMSIZE = {
    NumericFormat.FP16: 2,
    NumericFormat.BF16: 2,
    NumericFormat.FP32: 4,
    NumericFormat.FP64: 8,
}

# (explicit mantissa bits, minimum normal exponent, maximum exponent)
_GRID = {
    NumericFormat.FP16: (10, -14, 15),
    NumericFormat.BF16: (7, -126, 127),
    NumericFormat.FP32: (23, -126, 127),
}


def max_finite(fmt: NumericFormat) -> float:
    if fmt is NumericFormat.FP64:
        return float(np.finfo(np.float64).max)
    mant, _, emax = _GRID[fmt]
    return float((2.0 - 2.0 ** -mant) * 2.0 ** emax)


# ============================================================
# Quantization
# ============================================================

def quantize_array(x, fmt: NumericFormat) -> np.ndarray:
    """
    Round every element to the nearest value of `fmt`, ties to even.

    Subnormals are kept; magnitudes past the largest finite value round to
    +-inf as IEEE round-to-nearest does. NaN propagates.
    """
    x = np.asarray(x, dtype=np.float64)
    if fmt is NumericFormat.FP64:
        return x.copy()

    mant, emin, _ = _GRID[fmt]
    with np.errstate(over="ignore", invalid="ignore"):
        _, exp = np.frexp(x)
        # frexp gives |x| = m * 2**exp with m in [0.5, 1)
        exp = np.maximum(exp - 1, emin)
        ulp = np.ldexp(1.0, exp - mant)
        q = np.rint(x / ulp) * ulp
        q = np.where(np.abs(q) > max_finite(fmt), np.copysign(np.inf, x), q)
    return q


def quantize(x: float, fmt: NumericFormat) -> float:
    return float(quantize_array(x, fmt))


def on_grid(x, fmt: NumericFormat) -> bool:
    x = np.asarray(x, dtype=np.float64)
    return bool(np.array_equal(quantize_array(x, fmt), x, equal_nan=True))


# ============================================================
# Activations
# ============================================================

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(x):
    """log(1 + exp(x)), switching to x + log1p(exp(-x)) above the threshold."""
    x = np.asarray(x, dtype=np.float64)
    small = np.minimum(x, SOFTPLUS_LINEAR_THRESHOLD)
    large = np.maximum(x, SOFTPLUS_LINEAR_THRESHOLD)
    out = np.where(
        x > SOFTPLUS_LINEAR_THRESHOLD,
        large + np.log1p(np.exp(-large)),
        np.log1p(np.exp(small)),
    )
    return out if out.ndim else float(out)


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    out = x * sigmoid(x)
    return out if out.ndim else float(out)


def diag_product_specnorm(diags: Sequence[Sequence[float]]) -> float:
    """Spectral norm of a product of diagonal matrices given as vectors."""
    if len(diags) == 0:
        raise NumericsError("empty product")
    stacked = np.asarray([np.asarray(v, dtype=np.float64) for v in diags])
    if stacked.ndim != 2 or stacked.shape[1] < 1:
        raise NumericsError("diagonals must be equal-length non-empty vectors")
    return float(np.max(np.abs(np.prod(stacked, axis=0))))


def max_relative_deviation(x, ref) -> float:
    """max |x - ref| scaled by max |ref| (norm-wise, so near-zero entries do not blow up)."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    scale = max(float(np.max(np.abs(ref))) if ref.size else 0.0, np.finfo(np.float64).tiny)
    return float(np.max(np.abs(x - ref))) / scale if ref.size else 0.0


# ============================================================
# Precision policy
# ============================================================

class PrecisionPolicy(BaseModel):
    """Which format each stage computes in. Updates always land in master_format."""

    model_config = ConfigDict(frozen=True)

    activation_format: NumericFormat = NumericFormat.FP64
    gradient_format: NumericFormat = NumericFormat.FP64
    master_format: NumericFormat = NumericFormat.FP64

    @field_validator("master_format")
    @classmethod
    def _master_is_wide(cls, value: NumericFormat) -> NumericFormat:
        if value not in (NumericFormat.FP32, NumericFormat.FP64):
            raise ValueError("master_format must be fp32 or fp64")
        return value

    @classmethod
    def named(cls, name: str) -> "PrecisionPolicy":
        try:
            fmt = NumericFormat(name.lower())
        except ValueError:
            raise NumericsError(f"unknown precision policy '{name}'")
        if fmt is NumericFormat.FP64:
            return cls()
        return cls(activation_format=fmt, gradient_format=fmt, master_format=NumericFormat.FP32)

    @property
    def name(self) -> str:
        if self.activation_format is self.master_format:
            return self.activation_format.value
        return f"{self.activation_format.value}-mixed"


FP64_POLICY = PrecisionPolicy()


# ============================================================
# Tensors and memory accounting
# ============================================================

class MemoryMeter:
    """
    High-water mark of live tensor-buffer bytes.

    Bytes are counted at the width of the format a buffer is tagged with,
    not the FP64 carrier width. Buffers are released when the array is
    garbage collected.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.live_bytes = 0
        self.peak_bytes = 0

    def track(self, array: np.ndarray, fmt: NumericFormat = NumericFormat.FP64) -> np.ndarray:
        nbytes = int(array.size) * fmt.itemsize
        with self._lock:
            self.live_bytes += nbytes
            if self.live_bytes > self.peak_bytes:
                self.peak_bytes = self.live_bytes
        weakref.finalize(array, self._release, nbytes)
        return array

    def _release(self, nbytes: int) -> None:
        with self._lock:
            self.live_bytes -= nbytes

    def reset(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes


METER = MemoryMeter()


def memory_meter() -> int:
    return METER.peak_bytes


def tracked(array: np.ndarray, fmt: NumericFormat = NumericFormat.FP64) -> np.ndarray:
    return METER.track(array, fmt)


def zeros(shape, fmt: NumericFormat = NumericFormat.FP64) -> np.ndarray:
    return METER.track(np.zeros(shape, dtype=np.float64), fmt)


@dataclass(frozen=True)
class Tensor:
    """FP64 carrier data guaranteed to lie on the grid of `fmt`."""

    data: np.ndarray
    fmt: NumericFormat

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def nbytes(self) -> int:
        return int(self.data.size) * self.fmt.itemsize

    def on_grid(self) -> bool:
        return on_grid(self.data, self.fmt)

    def cast(self, fmt: NumericFormat) -> "Tensor":
        return tensor(self.data, fmt)


def tensor(data, fmt: NumericFormat = NumericFormat.FP64) -> Tensor:
    """The library tensor constructor: quantize, freeze, account."""
    arr = quantize_array(data, fmt)
    arr.setflags(write=False)
    METER.track(arr, fmt)
    return Tensor(arr, fmt)
