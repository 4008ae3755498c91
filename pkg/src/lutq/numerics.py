"""Scalar rounding rules shared by every quantizer in the package."""

import numpy as np


def round_half_away(x):
    """Round to nearest integer, ties away from zero.

    ``x - trunc(x)`` is exact in binary floating point, so unlike
    ``floor(|x| + 0.5)`` this never misrounds values just below one half.
    """
    x = np.asarray(x, dtype=np.float64)
    whole = np.trunc(x)
    frac = x - whole
    return whole + np.where(np.abs(frac) >= 0.5, np.sign(frac), 0.0)


def pow2_exponent(x):
    """Integer exponent ``round(log2|x|)``; zeros map to 0 (callers mask them)."""
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    safe = np.where(mag > 0, mag, 1.0)
    return round_half_away(np.log2(safe)).astype(np.int64)


def pow2_round(x):
    """Project onto ``{0} U {+-2^e}`` by rounding the exponent in the log domain."""
    x = np.asarray(x, dtype=np.float64)
    e = pow2_exponent(x)
    return np.where(x == 0, 0.0, np.sign(x) * np.ldexp(1.0, e))


def is_pow2(x) -> np.ndarray:
    """Elementwise test for membership in ``{+-2^e : e integer}``."""
    x = np.asarray(x, dtype=np.float64)
    mant, _ = np.frexp(np.abs(x))
    return (x != 0) & (mant == 0.5)


def quantize_uniform(x, bits: int, r: float):
    """Symmetric uniform quantizer on ``2^(bits-1) - 1`` levels per sign over ``[-r, r]``."""
    qmax = 2 ** (bits - 1) - 1
    m = np.clip(round_half_away(np.asarray(x, dtype=np.float64) * (qmax / r)), -qmax, qmax)
    return m * (r / qmax)


def smallest_pow2_at_least(value: float) -> float:
    if value <= 0:
        return 1.0
    m, e = np.frexp(value)
    return float(np.ldexp(1.0, int(e) - 1 if m == 0.5 else int(e)))
