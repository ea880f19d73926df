"""IEEE-754 field arithmetic for float32 / float16 / bfloat16.

Everything here works on the (sign, biased exponent, fraction) triple of a
value's bit pattern.  Scalar functions take and return Python ints/floats;
the ``*_array`` variants are vectorized over numpy uint arrays and are what
the probe planner and quantizer use on full tensors.
"""

from __future__ import annotations

import math
import struct
from typing import NamedTuple

import numpy as np


class FloatFormat(NamedTuple):
    name: str
    exponent_bits: int
    fraction_bits: int
    bias: int

    @property
    def width(self) -> int:
        return 1 + self.exponent_bits + self.fraction_bits

    @property
    def exponent_mask(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def fraction_mask(self) -> int:
        return (1 << self.fraction_bits) - 1


F32 = FloatFormat("f32", 8, 23, 127)
F16 = FloatFormat("f16", 5, 10, 15)
BF16 = FloatFormat("bf16", 8, 7, 127)

FORMATS = {f.name: f for f in (F32, F16, BF16)}

# largest finite magnitude per format (saturation target for quantize)
_MAX_FINITE = {
    "f32": (2.0 - 2.0 ** -23) * 2.0 ** 127,
    "f16": 65504.0,
    "bf16": (2.0 - 2.0 ** -7) * 2.0 ** 127,
}


class FloatFields(NamedTuple):
    sign: int
    exponent: int  # biased, as stored
    fraction: int
    format: FloatFormat


# ---------------------------------------------------------------------------
# bit pattern <-> fields (pure integer math, total over all patterns)

def decompose_bits(bits: int, fmt: FloatFormat) -> FloatFields:
    """Split a raw bit pattern into fields."""
    frac = bits & fmt.fraction_mask
    exp = (bits >> fmt.fraction_bits) & fmt.exponent_mask
    sign = (bits >> (fmt.width - 1)) & 1
    return FloatFields(sign, exp, frac, fmt)


def compose_bits(fields: FloatFields) -> int:
    """Inverse of decompose_bits; rejects fields wider than the format."""
    fmt = fields.format
    if not 0 <= fields.sign <= 1:
        raise ValueError(f"sign {fields.sign} out of range")
    if not 0 <= fields.exponent <= fmt.exponent_mask:
        raise ValueError(f"exponent {fields.exponent} exceeds {fmt.name} width")
    if not 0 <= fields.fraction <= fmt.fraction_mask:
        raise ValueError(f"fraction {fields.fraction} exceeds {fmt.name} width")
    return (
        (fields.sign << (fmt.width - 1))
        | (fields.exponent << fmt.fraction_bits)
        | fields.fraction
    )


# ---------------------------------------------------------------------------
# value <-> bit pattern

def value_to_bits(value: float, fmt: FloatFormat) -> int:
    """Bit pattern of ``value`` in ``fmt``.

    Exact when the value is representable in the format (the normal case
    here); otherwise the value is first rounded to nearest-even.
    """
    if fmt.name == "f32":
        return struct.unpack("<I", struct.pack("<f", value))[0]
    if fmt.name == "f16":
        return int(np.float16(value).view(np.uint16))
    # bf16: round-to-nearest-even on the f32 pattern, then keep the top half
    u = struct.unpack("<I", struct.pack("<f", value))[0]
    if (u & 0x7FFFFFFF) > 0x7F800000:  # NaN: truncate, force quiet bit
        return ((u >> 16) | 0x0040) & 0xFFFF
    return ((u + 0x7FFF + ((u >> 16) & 1)) >> 16) & 0xFFFF


def bits_to_value(bits: int, fmt: FloatFormat) -> float:
    if fmt.name == "f32":
        return struct.unpack("<f", struct.pack("<I", bits))[0]
    if fmt.name == "f16":
        return float(np.uint16(bits).view(np.float16))
    return struct.unpack("<f", struct.pack("<I", (bits & 0xFFFF) << 16))[0]


def decompose(value: float, fmt: FloatFormat = F32) -> FloatFields:
    """Fields of ``value``'s bit pattern in ``fmt`` (biased exponent)."""
    return decompose_bits(value_to_bits(value, fmt), fmt)


def compose(fields: FloatFields) -> float:
    """Value whose bit pattern has the given fields."""
    return bits_to_value(compose_bits(fields), fields.format)


# ---------------------------------------------------------------------------
# fraction geometry

def fraction_msb(fields: FloatFields) -> int | None:
    """1-based index (from the top of the fraction) of its highest set bit.

    Returns None when the fraction is zero (a pure power of two).
    """
    if fields.fraction == 0:
        return None
    return fields.format.fraction_bits - fields.fraction.bit_length() + 1


def place_value(exponent: int, k: int, fmt: FloatFormat = F32) -> float:
    """Weight of fraction bit ``k``: exactly 2^(exponent − bias − k).

    k = 0 is the implicit leading 1-bit; k = 1 is the top fraction bit.
    """
    return math.ldexp(1.0, exponent - fmt.bias - k)


# ---------------------------------------------------------------------------
# vectorized field access (uint arrays in, uint arrays out)

def split_bits_array(bits: np.ndarray, fmt: FloatFormat):
    """(sign, exponent, fraction) arrays for a uint bit-pattern array."""
    u = bits.astype(np.uint64)
    frac = u & np.uint64(fmt.fraction_mask)
    exp = (u >> np.uint64(fmt.fraction_bits)) & np.uint64(fmt.exponent_mask)
    sign = (u >> np.uint64(fmt.width - 1)) & np.uint64(1)
    return sign, exp, frac


def fraction_msb_array(frac: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Vectorized fraction_msb; 0 encodes "no set bit" (fraction == 0)."""
    f = frac.astype(np.uint64)
    out = np.zeros(f.shape, dtype=np.int64)
    nz = f != 0
    if np.any(nz):
        # bit_length via float64 log2 is unsafe near 2^53; fraction fields
        # are at most 23 bits wide so frexp is exact
        _, exp2 = np.frexp(f[nz].astype(np.float64))
        out[nz] = fmt.fraction_bits - exp2 + 1
    return out


def place_value_array(exponent: np.ndarray, k: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Vectorized place_value over int arrays of equal shape."""
    return np.ldexp(1.0, (exponent.astype(np.int64) - fmt.bias - k.astype(np.int64)).astype(np.int32))


# ---------------------------------------------------------------------------
# quantization (f32 -> narrower format), round-to-nearest-even, saturating

def quantize_array(values: np.ndarray, target: FloatFormat):
    """RNE-quantize float32 values to ``target``, saturating at its max.

    Returns (quantized values as float32 — every one exactly representable
    in the target format — and the number of saturated elements).
    """
    values = np.ascontiguousarray(values, dtype=np.float32)
    if target.name == "f32":
        return values.copy(), 0
    finite = np.isfinite(values)
    if target.name == "f16":
        with np.errstate(over="ignore"):
            out16 = values.astype(np.float16)
        sat = np.isinf(out16) & finite
        out16[sat] = np.where(values[sat] > 0, np.float16(65504), np.float16(-65504))
        return out16.astype(np.float32), int(sat.sum())
    # bf16
    u = values.view(np.uint32)
    nan = (u & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    rounded = (u + (np.uint32(0x7FFF) + ((u >> np.uint32(16)) & np.uint32(1)))) >> np.uint32(16)
    top = rounded.astype(np.uint16)
    top[nan] = ((u[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
    sat = (((top & np.uint16(0x7FFF)) == np.uint16(0x7F80)) & finite)
    top[sat] = ((top[sat] & np.uint16(0x8000)) | np.uint16(0x7F7F))
    back = (top.astype(np.uint32) << np.uint32(16)).view(np.float32)
    return back.copy(), int(sat.sum())
