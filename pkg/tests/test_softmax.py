import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tscp.softmax import argmax_class, entropy, entropy_at, softmax_at

logit_vectors = arrays(np.float64, st.integers(2, 12),
                       elements=st.floats(-30, 30, allow_nan=False, allow_infinity=False))
temps = st.floats(0.05, 20.0)


@pytest.mark.parametrize("t", [0.1, 1.0, 7.5])
def test_symmetric(t):
    np.testing.assert_allclose(softmax_at([0.0, 0.0], t), [0.5, 0.5])


def test_closed_forms():
    np.testing.assert_allclose(softmax_at([math.log(2), 0.0], 1.0), [2 / 3, 1 / 3], atol=1e-15)
    # sigma([2 ln 2, 0]) = [4/5, 1/5]
    np.testing.assert_allclose(softmax_at([math.log(2), 0.0], 0.5), [0.8, 0.2], atol=1e-15)


def test_no_overflow_at_tiny_temperature():
    p = softmax_at([1000.0, 999.0, -1000.0], 0.01)
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


@pytest.mark.parametrize("bad", [[0.0, np.nan], [np.inf, 0.0]])
def test_non_finite_rejected(bad):
    with pytest.raises(ValueError):
        softmax_at(bad, 1.0)


@pytest.mark.parametrize("t", [0.0, -1.0, np.inf])
def test_bad_temperature(t):
    with pytest.raises(ValueError):
        softmax_at([0.0, 1.0], t)


def test_entropy_values():
    assert entropy(np.full(4, 0.25)) == pytest.approx(math.log(4))
    assert entropy([0.0, 1.0, 0.0]) == 0.0
    expected = -(0.8 * math.log(0.8) + 0.2 * math.log(0.2))
    assert entropy([0.8, 0.2]) == pytest.approx(expected)
    assert entropy([0.8, 0.2]) == pytest.approx(0.5004, abs=1e-4)


def test_argmax():
    assert argmax_class([1.0, 3.0, 2.0]) == 1
    assert argmax_class([2.0, 2.0]) == 0
    with pytest.raises(ValueError):
        argmax_class([])


@settings(max_examples=300, deadline=None)
@given(z=logit_vectors, t=temps)
def test_probability_vector(z, t):
    p = softmax_at(z, t)
    assert np.all((p >= 0) & (p <= 1))
    assert abs(p.sum() - 1) < 1e-9
    assert 0 <= entropy(p) <= math.log(len(z)) + 1e-12


@settings(max_examples=300, deadline=None)
@given(z=logit_vectors, t=temps)
def test_argmax_invariant_under_temperature(z, t):
    assert argmax_class(z / t) == argmax_class(z)
    assert argmax_class(softmax_at(z, t)) == argmax_class(z) or \
        softmax_at(z, t)[argmax_class(z)] == softmax_at(z, t).max()


@settings(max_examples=300, deadline=None)
@given(z=logit_vectors, t=temps, c=st.floats(-100, 100))
def test_shift_invariance(z, t, c):
    np.testing.assert_allclose(softmax_at(z + c, t), softmax_at(z, t), atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 10), elements=st.floats(-5, 5)),
       t1=st.floats(0.2, 5.0), ratio=st.floats(1.05, 5.0))
def test_entropy_increases_with_temperature(z, t1, ratio):
    assume(np.ptp(z) > 1e-3)
    assert entropy_at(z, t1 * ratio) > entropy_at(z, t1) - 1e-12
