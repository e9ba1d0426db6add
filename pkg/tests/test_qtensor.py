import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shipgate.exceptions import InvalidInputError
from shipgate.qtensor import Accumulator, QuantTensor, dequantize, qrange, quantize, requantize


@pytest.mark.parametrize(
    "bits,signed,expected",
    [(4, True, (-7, 7)), (4, False, (0, 15)), (8, True, (-127, 127)), (2, True, (-1, 1)), (1, False, (0, 1))],
)
def test_qrange(bits, signed, expected):
    assert qrange(bits, signed) == expected


def test_signed_one_bit_rejected():
    with pytest.raises(InvalidInputError):
        qrange(1, True)


def test_values_outside_range_rejected():
    with pytest.raises(InvalidInputError):
        QuantTensor(np.array([-8]), 4, True)
    with pytest.raises(InvalidInputError):
        QuantTensor(np.array([16]), 4, False)


@pytest.mark.parametrize("scale", [0.0, -1.0, float("inf"), float("nan")])
def test_bad_scale_rejected(scale):
    with pytest.raises(InvalidInputError):
        QuantTensor(np.zeros(3), 4, True, scale)


def test_tensor_is_immutable():
    q = QuantTensor(np.array([1, 2]), 4, True)
    with pytest.raises(ValueError):
        q.values[0] = 3


def test_quantize_all_zero():
    q = quantize(np.zeros((2, 2, 2)), 4, True)
    assert q.scale == 1.0
    assert not q.values.any()


def test_quantize_hand_example():
    x = np.array([-1.4, 0.0, 0.7, 1.4])
    q = quantize(x, 4, True)
    assert q.scale == pytest.approx(0.2)
    # brute force: nearest integer to x/scale, ties to even
    expected = [int(round(v / q.scale)) for v in x]
    assert expected == [-7, 0, 4, 7]
    assert q.values.tolist() == expected


def test_quantize_pixels_identity():
    q = quantize(np.array([0.0, 255.0]), 8, False)
    assert q.scale == 1.0
    assert q.values.tolist() == [0, 255]


def test_quantize_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        quantize(np.array([1.0, np.nan]), 4)


def test_dequantize_definition():
    q = QuantTensor(np.array([-7, 4]), 4, True, 0.2)
    np.testing.assert_allclose(dequantize(q), [-1.4, 0.8])
    assert not dequantize(quantize(np.zeros(4), 4)).any()


def test_round_trip_error_bound_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        bits = int(rng.choice([2, 4, 8]))
        x = rng.normal(size=int(rng.integers(1, 50))) * rng.uniform(0.01, 100)
        q = quantize(x, bits, True)
        assert np.max(np.abs(dequantize(q) - x)) <= q.scale / 2 * (1 + 1e-12)


@pytest.mark.parametrize("value,expected", [(2.5, 2), (3.5, 4), (-2.5, -2), (0.5, 0), (1.5, 2)])
def test_ties_round_to_even(value, expected):
    acc = Accumulator(np.array([int(value * 2)]), 0.5)
    out = requantize(acc, 1.0, 8, signed=True)
    assert out.values[0] == expected


def test_requantize_examples():
    assert not requantize(Accumulator(np.zeros(4, dtype=int), 1.0), 1.0, 4).values.any()
    assert requantize(Accumulator(np.array([100]), 0.01), 0.5, 4).values[0] == 2
    assert requantize(Accumulator(np.array([10**6]), 1.0), 1.0, 4).values[0] == 15


@pytest.mark.parametrize("scale", [0.0, -0.5])
def test_requantize_rejects_bad_scale(scale):
    with pytest.raises(InvalidInputError):
        requantize(Accumulator(np.array([1]), 1.0), scale, 4)


def test_accumulator_overflow_rejected():
    with pytest.raises(InvalidInputError):
        Accumulator(np.array([2**31]), 1.0)


@settings(max_examples=200, deadline=None)
@given(
    x=hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3, allow_subnormal=False)),
    bits=st.sampled_from([2, 4, 8]),
    signed=st.booleans(),
)
def test_quantized_values_in_range(x, bits, signed):
    if not signed:
        x = np.abs(x)
    lo, hi = qrange(bits, signed)
    if 0 < np.abs(x).max() / hi < np.finfo(np.float64).tiny:
        # the scale itself would be subnormal
        with pytest.raises(InvalidInputError):
            quantize(x, bits, signed)
        return
    q = quantize(x, bits, signed)
    assert q.values.min() >= lo and q.values.max() <= hi
    assert np.max(np.abs(dequantize(q) - x)) <= q.scale / 2 * (1 + 1e-9) + 1e-12
