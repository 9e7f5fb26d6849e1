"""Fixed-point formats and exact integer rounding helpers.

All datapath values are plain integers carried in numpy int64 arrays. A
FixedFormat only records how to interpret them: activations and errors are
Q8.8 in 16 bits, weights are Q16.16 in 32 bits. Rounding is round-half-even
everywhere, which keeps every path reproducible and matches what an exact
ADC/requantizer would do.
"""

import numpy as np

from .errors import RangeError


class FixedFormat:
    """Two's-complement fixed point with `total_bits` and `frac_bits`."""

    def __init__(self, total_bits, frac_bits):
        self.total_bits = total_bits
        self.frac_bits = frac_bits
        self.min_raw = -(1 << (total_bits - 1))
        self.max_raw = (1 << (total_bits - 1)) - 1
        self.one = 1 << frac_bits
        self.scale = float(self.one)

    def __repr__(self):
        return "Q%d.%d" % (self.total_bits - self.frac_bits, self.frac_bits)

    def __eq__(self, other):
        return (isinstance(other, FixedFormat)
                and self.total_bits == other.total_bits
                and self.frac_bits == other.frac_bits)

    def __hash__(self):
        return hash((self.total_bits, self.frac_bits))

    def quantize(self, values):
        """Real values -> raw integers, round-half-even, saturating."""
        raw = np.rint(np.asarray(values, dtype=np.float64) * self.scale)
        raw = np.clip(raw, self.min_raw, self.max_raw)
        return raw.astype(np.int64)

    def to_float(self, raw):
        return np.asarray(raw, dtype=np.float64) / self.scale

    def clamp(self, raw):
        """Saturate raw integers into this format's range."""
        return np.clip(np.asarray(raw, dtype=np.int64), self.min_raw, self.max_raw)

    def check(self, raw):
        """Raise RangeError if any raw value is outside the format."""
        raw = np.asarray(raw)
        if raw.size and (raw.min() < self.min_raw or raw.max() > self.max_raw):
            raise RangeError(
                "value outside %s range [%d, %d]" % (self, self.min_raw, self.max_raw))
        return raw.astype(np.int64)


Q8_8 = FixedFormat(16, 8)
Q16_16 = FixedFormat(32, 16)


def rhe_shift(v, k):
    """Arithmetic right shift by k with round-half-even.

    Exact for any int64 input; k = 0 returns the input unchanged. This is
    the requantization step used after every accumulation.
    """
    v = np.asarray(v, dtype=np.int64)
    if k == 0:
        return v.copy()
    q = v >> k
    r = v - (q << k)
    half = np.int64(1) << (k - 1)
    bump = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + bump


def requantize(acc, shift, fmt):
    """Shift-round an accumulator and saturate into fmt."""
    return fmt.clamp(rhe_shift(acc, shift))


def to_signed(value, bits):
    """Reinterpret the low `bits` of an integer as two's complement."""
    mask = (1 << bits) - 1
    value &= mask
    sign = 1 << (bits - 1)
    return value - (1 << bits) if value & sign else value
