import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import log_ndtr, ndtr

from countyiv.quadrature import log_bvn, log_bvn_derivs, log_ndtr_derivs

from conftest import bvn_cdf

finite = st.floats(-6, 6)
corr = st.floats(-0.97, 0.97)


@pytest.mark.parametrize("h,k,r", [
    (0.0, 0.0, 0.0), (0.3, -0.4, 0.5), (-1.2, 0.8, -0.7), (2.0, 1.5, 0.95),
    (-2.5, -1.0, 0.3), (1.0, -3.0, -0.9), (0.1, 0.2, 0.99), (-0.5, 2.5, -0.99),
])
def test_matches_reference_cdf(h, k, r):
    assert np.exp(log_bvn(h, k, r)) == pytest.approx(bvn_cdf(h, k, r), abs=1e-10)


def test_independence_factorizes():
    h, k = np.array([-1.0, 0.0, 2.0]), np.array([0.5, -2.0, 1.0])
    np.testing.assert_allclose(log_bvn(h, k, 0.0), log_ndtr(h) + log_ndtr(k), atol=1e-13)


def test_symmetric_point():
    # P(U <= 0, V <= 0) = 1/4 + asin(r) / (2 pi)
    for r in (-0.8, -0.2, 0.4, 0.9):
        assert np.exp(log_bvn(0.0, 0.0, r)) == pytest.approx(0.25 + np.arcsin(r) / (2 * np.pi), abs=1e-12)


def test_deep_tail_stays_finite():
    v = log_bvn(-30.0, -30.0, 0.5)
    assert np.isfinite(v) and v < -400


def test_order_doubling():
    rng = np.random.default_rng(0)
    h, k, r = rng.normal(0, 2, 200), rng.normal(0, 2, 200), rng.uniform(-0.95, 0.95, 200)
    np.testing.assert_allclose(log_bvn(h, k, r, 64), log_bvn(h, k, r, 128), atol=1e-8)


def test_rejects_low_order_and_unit_correlation():
    with pytest.raises(ValueError):
        log_bvn(0.0, 0.0, 0.2, order=8)
    with pytest.raises(ValueError):
        log_bvn(0.0, 0.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(finite, finite, corr)
def test_first_derivatives_match_finite_differences(h, k, r):
    D = log_bvn_derivs(h, k, r, second=True)
    e = 1e-5
    fd = [
        (log_bvn(h + e, k, r) - log_bvn(h - e, k, r)) / (2 * e),
        (log_bvn(h, k + e, r) - log_bvn(h, k - e, r)) / (2 * e),
        (log_bvn(h, k, r + e) - log_bvn(h, k, r - e)) / (2 * e),
    ]
    got = [D.h, D.k, D.r]
    for a, b in zip(got, fd):
        assert float(a) == pytest.approx(float(b), rel=1e-5, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-0.9, 0.9))
def test_second_derivatives_match_finite_differences(h, k, r):
    e = 1e-5
    D = log_bvn_derivs(h, k, r, second=True)
    up = log_bvn_derivs(h + e, k, r)
    dn = log_bvn_derivs(h - e, k, r)
    assert float(D.hh) == pytest.approx(float((up.h - dn.h) / (2 * e)), rel=1e-4, abs=1e-6)
    assert float(D.hk) == pytest.approx(float((up.k - dn.k) / (2 * e)), rel=1e-4, abs=1e-6)
    assert float(D.hr) == pytest.approx(float((up.r - dn.r) / (2 * e)), rel=1e-4, abs=1e-6)
    up = log_bvn_derivs(h, k, r + e)
    dn = log_bvn_derivs(h, k, r - e)
    assert float(D.rr) == pytest.approx(float((up.r - dn.r) / (2 * e)), rel=1e-4, abs=1e-6)
    assert float(D.kr) == pytest.approx(float((up.k - dn.k) / (2 * e)), rel=1e-4, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(finite, finite, corr)
def test_probability_bounds_and_monotonicity(h, k, r):
    p = np.exp(log_bvn(h, k, r))
    assert 0.0 <= p <= min(ndtr(h), ndtr(k)) * (1 + 1e-9)
    assert log_bvn(h + 0.1, k, r) >= log_bvn(h, k, r) - 1e-12


def test_log_ndtr_derivs():
    x = np.linspace(-40, 8, 50)
    v, d1, d2 = log_ndtr_derivs(x)
    np.testing.assert_allclose(v, log_ndtr(x))
    e = 1e-6
    np.testing.assert_allclose(d1, (log_ndtr(x + e) - log_ndtr(x - e)) / (2 * e), rtol=1e-5)
    assert np.all(d2 < 0)
