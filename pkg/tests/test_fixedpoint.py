import numpy as np
import pytest
from fractions import Fraction
from hypothesis import given, strategies as st

from xbarsim.fixedpoint import FixedFormat, Q8_8, Q16_16, rhe_shift, requantize, to_signed
from xbarsim.errors import RangeError


def rhe_oracle(v, k):
    # independent round-half-even on the exact rational v / 2^k
    x = Fraction(int(v), 1 << k)
    floor = x.numerator // x.denominator
    frac = x - floor
    if frac > Fraction(1, 2):
        return floor + 1
    if frac < Fraction(1, 2):
        return floor
    return floor + (floor & 1)


def test_formats():
    assert Q8_8.min_raw == -32768 and Q8_8.max_raw == 32767
    assert Q16_16.min_raw == -(1 << 31) and Q16_16.max_raw == (1 << 31) - 1
    assert repr(Q8_8) == "Q8.8"
    assert repr(Q16_16) == "Q16.16"


def test_quantize_round_half_even():
    fmt = Q8_8
    # 0.001953125 = 0.5/256: ties go to even raw values
    assert fmt.quantize(1.5 / 256)[()] == 2
    assert fmt.quantize(2.5 / 256)[()] == 2
    assert fmt.quantize(-1.5 / 256)[()] == -2
    assert fmt.quantize(1000.0)[()] == 32767
    assert fmt.quantize(-1000.0)[()] == -32768


def test_quantize_roundtrip_exact_values():
    fmt = Q8_8
    raw = np.arange(-32768, 32768, 97, dtype=np.int64)
    assert np.array_equal(fmt.quantize(fmt.to_float(raw)), raw)


@given(st.integers(min_value=-(1 << 62), max_value=(1 << 62) - 1),
       st.integers(min_value=0, max_value=40))
def test_rhe_shift_matches_oracle(v, k):
    got = int(rhe_shift(np.int64(v), k))
    assert got == rhe_oracle(v, k)


def test_rhe_shift_vector():
    v = np.array([-3, -1, 3, 5, 0, 256, 257], dtype=np.int64)
    assert rhe_shift(v, 1).tolist() == [-2, 0, 2, 2, 0, 128, 128]
    assert rhe_shift(v, 0).tolist() == v.tolist()


def test_requantize_saturates():
    acc = np.array([1 << 40, -(1 << 40), 1 << 15, 3 << 15], dtype=np.int64)
    out = requantize(acc, 16, Q8_8)
    # the two tie cases round half to even: 0.5 -> 0, 1.5 -> 2
    assert out.tolist() == [32767, -32768, 0, 2]


def test_check_raises():
    with pytest.raises(RangeError):
        Q8_8.check(np.array([40000]))
    ok = Q8_8.check(np.array([-32768, 32767]))
    assert ok.dtype == np.int64


def test_to_signed():
    assert to_signed(0xFFFF, 16) == -1
    assert to_signed(0x7FFF, 16) == 32767
    assert to_signed(0x8000, 16) == -32768
    assert to_signed(5, 16) == 5
