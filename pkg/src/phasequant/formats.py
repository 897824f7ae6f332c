"""Bit-exact software emulation of two tiny floating-point grids.

Two formats are emulated at the code (bit-pattern) level:

* 4-bit, laid out ``[sign(1) | exponent(2) | mantissa(1)]`` with exponent
  bias 1.  Exponent 0 is subnormal (value ``mantissa * 0.5``), there are no
  infinities or NaNs, and the decoded grid is exactly
  ``{+-0, +-0.5, +-1, +-1.5, +-2, +-3, +-4, +-6}``.
* 8-bit, laid out ``[sign(1) | exponent(4) | mantissa(3)]`` with exponent
  bias 7, following the OCP convention for the 1-4-3 format: no infinities,
  a single NaN pattern per sign (exponent 1111 with mantissa 111), largest
  finite magnitude 448, subnormals ``mantissa * 2**-9``.

Encoding rounds to the nearest grid point with ties resolved toward the
code whose mantissa low bit is 0, saturates past the largest finite
magnitude, and preserves the sign of zero.  All functions are pure and
accept scalars or numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError

FP4_MAX = 6.0
E4M3_MAX = 448.0

# Nonnegative magnitude grid of the 4-bit format, in code order
# (code = sign<<3 | exp<<1 | mantissa).
_FP4_MAGNITUDES = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0], dtype=np.float64)

# Decoded value for every 4-bit code; index == code.  Codes 8..15 are the
# negative mirror, so code 8 decodes to -0.0.
FP4_VALUES = np.concatenate([_FP4_MAGNITUDES, -_FP4_MAGNITUDES]).astype(np.float32)


def _build_e4m3_tables():
    values = np.zeros(256, dtype=np.float32)
    is_nan = np.zeros(256, dtype=bool)
    for code in range(256):
        sign = (code >> 7) & 1
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 0:
            mag = man * 2.0**-9
        elif exp == 15 and man == 7:
            is_nan[code] = True
            values[code] = np.float32(np.nan)
            continue
        else:
            mag = (1.0 + man / 8.0) * 2.0 ** (exp - 7)
        values[code] = np.float32(-mag if sign else mag)
    return values, is_nan


E4M3_VALUES, E4M3_IS_NAN = _build_e4m3_tables()

# Nonnegative grid in ascending value order; position i holds the decoded
# value of code i (codes 0..126; code 127 is the NaN pattern).
_E4M3_MAGNITUDES = E4M3_VALUES[:127].astype(np.float64)

# Midpoints between adjacent magnitudes, exact in binary64.
_FP4_MIDS = (_FP4_MAGNITUDES[:-1] + _FP4_MAGNITUDES[1:]) / 2.0
_E4M3_MIDS = (_E4M3_MAGNITUDES[:-1] + _E4M3_MAGNITUDES[1:]) / 2.0

# Half-width of the grid interval enclosing each magnitude index, used by
# reconstruction-error bounds.  Entry i is the largest distance a value
# rounding to magnitude i can have from it (within the non-saturating range).
FP4_HALF_GAPS = np.array(
    [0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 1.0, 1.0], dtype=np.float64
)


def _reject_non_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{what} must be finite")


def _round_to_magnitude_grid(mag: np.ndarray, mids: np.ndarray) -> np.ndarray:
    """Index of the nearest magnitude, ties toward even (mantissa-0) index.

    ``mids`` are the exact midpoints of an ascending magnitude grid whose
    entries alternate mantissa parity starting even, so at any midpoint the
    even-mantissa neighbour is the even index.
    """
    idx = np.searchsorted(mids, mag, side="left")
    at_mid = (idx < mids.size) & (mag == mids[np.minimum(idx, mids.size - 1)])
    idx = idx + (at_mid & (idx % 2 == 1))
    return idx


def encode_fp4(x) -> np.ndarray:
    """Round finite values to the nearest 4-bit code, saturating at +-6.

    Ties go to the even-mantissa neighbour; the sign of zero is kept.
    Raises NonFiniteError on NaN or infinite input.
    """
    arr = np.asarray(x)
    _reject_non_finite(arr, "value to encode")
    v = arr.astype(np.float64, copy=False)
    mag = np.minimum(np.abs(v), FP4_MAX)
    idx = _round_to_magnitude_grid(mag, _FP4_MIDS)
    codes = np.where(np.signbit(v), idx + 8, idx).astype(np.uint8)
    if np.isscalar(x) or arr.ndim == 0:
        return codes[()] if codes.ndim == 0 else codes
    return codes


def decode_fp4(codes) -> np.ndarray:
    """Decoded grid value of each 4-bit code, as float32."""
    c = np.asarray(codes)
    if c.size and (c.min() < 0 or c.max() > 15):
        raise ValueError("4-bit code out of range")
    return FP4_VALUES[c]


def encode_e4m3(x) -> np.ndarray:
    """Round finite values to the nearest 8-bit code, saturating at +-448.

    Round-to-nearest, ties to even mantissa; never yields the NaN pattern.
    """
    arr = np.asarray(x)
    _reject_non_finite(arr, "scale to encode")
    v = arr.astype(np.float64, copy=False)
    mag = np.minimum(np.abs(v), E4M3_MAX)
    idx = _round_to_magnitude_grid(mag, _E4M3_MIDS)
    codes = np.where(np.signbit(v), idx + 128, idx).astype(np.uint8)
    if np.isscalar(x) or arr.ndim == 0:
        return codes[()] if codes.ndim == 0 else codes
    return codes


def decode_e4m3(codes) -> np.ndarray:
    """Decoded grid value of each 8-bit code; the NaN pattern is an error."""
    c = np.asarray(codes)
    if E4M3_IS_NAN[c].any():
        raise ValueError("cannot decode the NaN pattern")
    return E4M3_VALUES[c]


def fp4_half_gap(scaled_magnitude) -> np.ndarray:
    """Half-width of the 4-bit grid interval enclosing ``|scaled value|``."""
    mag = np.minimum(np.abs(np.asarray(scaled_magnitude, dtype=np.float64)), FP4_MAX)
    idx = _round_to_magnitude_grid(mag, _FP4_MIDS)
    return FP4_HALF_GAPS[idx]


def _shortest_decimal(v: np.float32) -> str:
    f = float(v)
    if np.isnan(f):
        return "nan"
    return repr(f)


def format_tables() -> str:
    """All codes of both grids as ``code,value`` lines for diffing.

    The 16 four-bit codes come first, then the 256 eight-bit codes, both in
    ascending bit order, values in shortest round-trip decimal (signed zero
    kept, NaN spelled ``nan``).
    """
    lines = []
    for code in range(16):
        lines.append(f"{code},{_shortest_decimal(FP4_VALUES[code])}")
    for code in range(256):
        lines.append(f"{code},{_shortest_decimal(E4M3_VALUES[code])}")
    return "\n".join(lines) + "\n"
