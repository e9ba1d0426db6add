"""Low-bit integer tensors with a per-tensor scale.

All rounding is round-half-to-even (``np.rint``). Signed ranges are symmetric,
so a signed ``b``-bit tensor holds values in ``[-(2**(b-1) - 1), 2**(b-1) - 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError

BIT_WIDTHS = (1, 2, 4, 8)
ACC_LIMIT = 2**31  # accumulators are int32: |acc| < ACC_LIMIT


def qrange(bit_width: int, signed: bool) -> tuple[int, int]:
    """Return the inclusive integer range for a bit width and signedness."""
    if bit_width not in BIT_WIDTHS:
        raise InvalidInputError(f"bit width must be one of {BIT_WIDTHS}, got {bit_width}")
    if signed:
        if bit_width == 1:
            raise InvalidInputError("signed 1-bit has an empty symmetric range")
        qmax = 2 ** (bit_width - 1) - 1
        return -qmax, qmax
    return 0, 2**bit_width - 1


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_scale(scale) -> float:
    scale = float(scale)
    if not (math.isfinite(scale) and scale > 0):
        raise InvalidInputError(f"scale must be positive and finite, got {scale}")
    return scale


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Integer tensor; the real value of each entry is ``value * scale``.

    Activations are ``(channels, height, width)``; weight tensors use the same
    class with their natural rank.
    """

    values: np.ndarray
    bit_width: int
    signed: bool
    scale: float = 1.0

    def __post_init__(self):
        lo, hi = qrange(self.bit_width, self.signed)
        values = np.asarray(self.values)
        if values.size and not np.issubdtype(values.dtype, np.integer):
            if not np.all(values == np.round(values)):
                raise InvalidInputError("QuantTensor values must be integers")
        values = _frozen(values, np.int32)
        if values.size and (values.min() < lo or values.max() > hi):
            raise InvalidInputError(
                f"values outside {'signed' if self.signed else 'unsigned'} "
                f"{self.bit_width}-bit range [{lo}, {hi}]"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "scale", _check_scale(self.scale))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def qmin(self) -> int:
        return qrange(self.bit_width, self.signed)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bit_width, self.signed)[1]

    @property
    def size(self) -> int:
        return int(self.values.size)

    def density(self) -> float:
        return float(np.count_nonzero(self.values)) / self.size if self.size else 0.0

    def equals(self, other: "QuantTensor") -> bool:
        return (
            self.bit_width == other.bit_width
            and self.signed == other.signed
            and self.scale == other.scale
            and self.shape == other.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def __repr__(self):
        kind = "s" if self.signed else "u"
        return f"QuantTensor(shape={self.shape}, {kind}{self.bit_width}, scale={self.scale!r})"


@dataclass(frozen=True, eq=False)
class Accumulator:
    """Wide signed integer result of a quantized layer, before requantization."""

    values: np.ndarray
    scale: float

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.size and np.abs(values.astype(np.int64)).max() >= ACC_LIMIT:
            raise InvalidInputError("accumulator value overflows int32")
        object.__setattr__(self, "values", _frozen(values, np.int64))
        object.__setattr__(self, "scale", _check_scale(self.scale))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


def quantize(x, bit_width: int, signed: bool = True) -> QuantTensor:
    """Symmetric per-tensor quantization with ``scale = max|x| / qmax``.

    An all-zero tensor gets scale 1.0.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("cannot quantize a tensor with non-finite entries")
    lo, hi = qrange(bit_width, signed)
    if not signed and x.size and x.min() < 0:
        raise InvalidInputError("negative values cannot be quantized as unsigned")
    peak = float(np.abs(x).max()) if x.size else 0.0
    scale = peak / hi if peak > 0 else 1.0
    if scale < np.finfo(np.float64).tiny:
        raise InvalidInputError("tensor magnitude is too small to quantize")
    q = np.clip(np.rint(x / scale), lo, hi)
    return QuantTensor(q.astype(np.int32), bit_width, signed, scale)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.values.astype(np.float64) * q.scale


def requantize(acc: Accumulator, out_scale: float, out_bits: int, signed: bool = False) -> QuantTensor:
    """Map accumulator values onto a new scale: ``clamp(rint(acc * acc_scale / out_scale))``."""
    out_scale = float(out_scale)
    if not (math.isfinite(out_scale) and out_scale > 0):
        raise InvalidInputError(f"out_scale must be positive, got {out_scale}")
    lo, hi = qrange(out_bits, signed)
    q = np.clip(np.rint(acc.values.astype(np.float64) * acc.scale / out_scale), lo, hi)
    return QuantTensor(q.astype(np.int32), out_bits, signed, out_scale)
