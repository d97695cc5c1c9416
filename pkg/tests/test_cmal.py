import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from floodcast.cmal import (
    CmalParams,
    cmal_cdf,
    cmal_mean,
    cmal_median,
    cmal_mode,
    cmal_nll,
    cmal_quantile,
    nll_and_grad_raw,
    params_from_raw,
)


def single(mu=0.0, b=1.0, tau=0.5):
    return CmalParams([1.0], [mu], [b], [tau])


def random_mixture(rng, k):
    w = rng.dirichlet(np.ones(k))
    return CmalParams(w, rng.normal(0, 3, k), rng.uniform(0.05, 3, k), rng.uniform(0.05, 0.95, k))


def test_nll_at_location_is_log4():
    assert cmal_nll(single(2.5), 2.5) == pytest.approx(math.log(4.0), abs=1e-15)


def test_nll_grows_with_distance():
    p = CmalParams([0.3, 0.7], [0.0, 1.0], [1.0, 0.5], [0.2, 0.6])
    vals = [cmal_nll(p, y) for y in (2.0, 10.0, 100.0, 1e4)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def density_integral(p, lo, hi, moment=0):
    """Quadrature of y**moment * density over [lo, hi], split at the density kinks."""
    kinks = sorted(float(m) for m in p.loc if lo < m < hi)
    edges = [lo, *kinks, hi]
    total = 0.0
    for a, b in zip(edges, edges[1:]):
        total += integrate.quad(lambda y: y**moment * math.exp(-cmal_nll(p, y)), a, b,
                                limit=400, epsabs=1e-13, epsrel=1e-12)[0]
    return total


def span(p):
    # the slowest tail decays like exp(-min(tau, 1 - tau) |y - mu| / b)
    w = 60.0 * float((p.scale / np.minimum(p.asym, 1 - p.asym)).max())
    return float(p.loc.min()) - w, float(p.loc.max()) + w


def test_density_integrates_to_one():
    rng = np.random.default_rng(5)
    p = random_mixture(rng, 3)
    assert density_integral(p, *span(p)) == pytest.approx(1.0, abs=1e-9)


def test_cdf_matches_integrated_density():
    rng = np.random.default_rng(6)
    p = random_mixture(rng, 2)
    for x in (-3.0, 0.0, 1.7):
        assert cmal_cdf(p, x) == pytest.approx(density_integral(p, span(p)[0], x), abs=1e-9)


def test_mean_matches_integral():
    rng = np.random.default_rng(7)
    p = random_mixture(rng, 3)
    assert cmal_mean(p) == pytest.approx(density_integral(p, *span(p), moment=1), abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 4), st.floats(0.02, 0.98))
def test_quantile_at_tau_is_location(mu, b, tau):
    p = single(mu, b, tau)
    assert cmal_quantile(p, tau) == pytest.approx(mu, abs=1e-6)


def test_symmetric_median_is_location():
    assert cmal_median(single(1.25, 0.4, 0.5)) == pytest.approx(1.25, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.floats(0.01, 0.99))
def test_quantile_inverts_cdf(seed, k, q):
    p = random_mixture(np.random.default_rng(seed), k)
    x = cmal_quantile(p, q)
    assert abs(cmal_cdf(p, x) - q) < 1e-6


def test_quantile_rejects_bad_level():
    with pytest.raises(ValueError):
        cmal_quantile(single(), 1.0)


def test_params_from_raw_are_valid():
    rng = np.random.default_rng(0)
    p = params_from_raw(rng.normal(0, 5, size=(7, 12)), 3)
    assert p.check()
    assert p.weights.shape == (7, 3)


def test_raw_gradient_matches_central_differences():
    rng = np.random.default_rng(1)
    k = 3
    raw = rng.normal(size=(5, 4 * k))
    y = rng.normal(size=5)
    nll, g = nll_and_grad_raw(raw, y, k)
    np.testing.assert_allclose(nll, cmal_nll(params_from_raw(raw, k), y), rtol=1e-12)
    eps = 1e-6
    num = np.zeros_like(raw)
    for idx in np.ndindex(raw.shape):
        r1, r2 = raw.copy(), raw.copy()
        r1[idx] += eps
        r2[idx] -= eps
        num[idx] = (nll_and_grad_raw(r1, y, k)[0].sum() - nll_and_grad_raw(r2, y, k)[0].sum()) / (2 * eps)
    np.testing.assert_allclose(g, num, atol=1e-7, rtol=1e-6)


def test_mode_of_single_component_is_location():
    assert cmal_mode(single(3.0, 0.5, 0.3)) == pytest.approx(3.0, abs=1e-3)


def test_rescale_maps_quantiles():
    p = CmalParams([0.4, 0.6], [0.0, 1.0], [1.0, 0.3], [0.3, 0.7])
    m = p.rescale(10.0, 2.0)
    assert cmal_quantile(m, 0.8) == pytest.approx(10.0 + 2.0 * cmal_quantile(p, 0.8), abs=1e-6)
