from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

import oracles
from inflrisk.errors import DegenerateQuantiles, InvalidParams
from inflrisk.density import (
    DEFAULT_TAUS,
    SkewTParams,
    fit_skewt,
    fit_skewt_batch,
    initial_params,
    rearrange,
    risk,
    skewt_cdf,
    skewt_density,
    skewt_quantile,
)

TAUS = np.array(DEFAULT_TAUS)


def quantiles(p):
    return np.array([skewt_quantile(p, t) for t in TAUS])


def test_params_are_validated():
    with pytest.raises(InvalidParams):
        SkewTParams(0.0, 0.0, 1.0, 5.0)
    with pytest.raises(InvalidParams):
        SkewTParams(0.0, 1.0, 1.0, -1.0)
    with pytest.raises(InvalidParams):
        SkewTParams(np.nan, 1.0, 1.0, 5.0)


def test_density_matches_textbook_formula(rng):
    for _ in range(20):
        xi, om, al, nu = rng.normal(), rng.uniform(0.3, 3), rng.normal(0, 3), rng.uniform(0.8, 30)
        y = xi + om * rng.standard_normal(25) * 3
        np.testing.assert_allclose(skewt_density(SkewTParams(xi, om, al, nu), y),
                                   oracles.skewt_pdf(y, xi, om, al, nu), rtol=1e-10, atol=1e-300)


def test_symmetric_case_is_student_t():
    p = SkewTParams(1.0, 2.0, 0.0, 4.0)
    y = np.linspace(-10, 10, 41)
    np.testing.assert_allclose(skewt_density(p, y), stats.t.pdf(y, 4.0, 1.0, 2.0), rtol=1e-12)
    assert skewt_cdf(p, 1.0) == pytest.approx(0.5, abs=1e-10)


def test_gaussian_limit():
    p = SkewTParams(0.0, 1.0, 0.0, 1e6)
    assert skewt_cdf(p, 1.959964) == pytest.approx(0.975, abs=1e-4)
    for x in np.linspace(-3, 3, 13):
        assert skewt_cdf(p, x) == pytest.approx(stats.norm.cdf(x), abs=1e-3)


def test_cdf_matches_sampling_oracle(rng):
    xi, om, al, nu = 2.0, 1.0, 3.0, 8.0
    draws = oracles.skewt_sample(xi, om, al, nu, 200_000, rng)
    p = SkewTParams(xi, om, al, nu)
    for t in TAUS:
        q = skewt_quantile(p, t)
        assert np.mean(draws <= q) == pytest.approx(t, abs=0.005)


def test_quantile_round_trip():
    for p in (SkewTParams(2.0, 1.0, 3.0, 8.0), SkewTParams(-1.0, 0.4, -6.0, 1.5), SkewTParams(0.0, 3.0, 0.5, 60.0)):
        for t in TAUS:
            assert skewt_cdf(p, skewt_quantile(p, t)) == pytest.approx(t, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(0.2, 5), st.floats(-10, 10), st.floats(2.0, 50.0))
def test_density_properties(xi, om, al, nu):
    p = SkewTParams(xi, om, al, nu)
    grid = np.linspace(xi - 20 * om, xi + 20 * om, 201)
    assert np.all(skewt_density(p, grid) >= 0)
    cdf = skewt_cdf(p, grid)
    assert np.all(np.diff(cdf) >= -1e-12)
    mass = integrate.quad(lambda y: float(skewt_density(p, y)), xi - 50 * om, xi + 50 * om,
                          points=[xi], limit=200)[0]
    assert mass == pytest.approx(skewt_cdf(p, xi + 50 * om) - skewt_cdf(p, xi - 50 * om), abs=1e-7)
    # a t tail beyond 50 scale units holds more than 1e-4 until nu is about 2.43
    if nu >= 2.5:
        assert 1 - 1e-4 <= mass <= 1 + 1e-8


def test_rearrange_examples():
    q, flag = rearrange([0.0, 1.0, 2.0, 3.0, 4.0])
    assert q.tolist() == [0, 1, 2, 3, 4] and not flag
    q, flag = rearrange([1.0, 0.0, 2.0, 3.0, 4.0])
    assert q.tolist() == [0, 1, 2, 3, 4] and flag
    q, flag = rearrange([2.0] * 5)
    assert q.tolist() == [2.0] * 5 and not flag
    with pytest.raises(ValueError):
        rearrange([0.0, np.nan, 1.0, 2.0, 3.0])


def test_initial_params():
    p = initial_params(np.array([-1.0, 0.5, 1.0, 1.5, 4.0]))
    assert (p.xi, p.alpha, p.nu) == (1.0, 1.0, 5.0)
    assert p.omega == pytest.approx(1.0 / 1.349)


def test_round_trip_from_known_params():
    p = SkewTParams(2.0, 1.0, 3.0, 8.0)
    q = quantiles(p)
    fit = fit_skewt(q)
    assert np.max(np.abs(quantiles(fit.params) - q)) < 1e-3
    assert np.max(np.abs(fit.fitted - q)) < 1e-3
    assert fit.objective <= min(fit.start_objectives) + 1e-10


def test_symmetric_quantiles_give_a_centered_fit():
    q = 2.0 + np.array([-2.5, -0.8, 0.0, 0.8, 2.5])
    fit = fit_skewt(q)
    assert abs(skewt_quantile(fit.params, 0.5) - 2.0) < 0.01


def test_normal_quantiles_give_a_normal_fit():
    fit = fit_skewt(stats.norm.ppf(TAUS))
    x = np.linspace(-3, 3, 25)
    np.testing.assert_allclose(skewt_cdf(fit.params, x), stats.norm.cdf(x), atol=0.01)


def test_degenerate_quantiles_raise():
    with pytest.raises(DegenerateQuantiles):
        fit_skewt(np.full(5, 1.0))
    with pytest.raises(DegenerateQuantiles):
        fit_skewt(np.array([1.0, 0.0, 2.0, 3.0, 4.0]))
    with pytest.raises(DegenerateQuantiles):
        fit_skewt(np.arange(4.0))


def test_batch_fit_round_trips_many_shapes(rng):
    params = [SkewTParams(rng.normal(2, 2), rng.uniform(0.2, 3), rng.normal(0, 4), rng.uniform(1.5, 40))
              for _ in range(25)]
    Q = np.array([quantiles(p) for p in params])
    fits = fit_skewt_batch(Q)
    for q, f in zip(Q, fits):
        assert np.max(np.abs(quantiles(f.params) - q)) < 1e-3
        assert f.objective <= min(f.start_objectives) + 1e-8 * (q[-1] - q[0]) ** 2


def test_risk_examples():
    r = risk(SkewTParams(3.0, 1.5, 0.0, 7.0))
    assert r.iar == pytest.approx(0.5, abs=1e-10)
    assert (r.threshold_iar, r.threshold_dar) == (3.0, 0.0)
    n = SkewTParams(0.0, 1.0, 0.0, 1e6)
    assert risk(n, pi_dar=0.0).dar == pytest.approx(0.5, abs=1e-10)
    assert risk(n, pi_dar=-1.6449).dar == pytest.approx(0.05, abs=1e-3)
    assert risk(SkewTParams(2.0, 1.0, 3.0, 3.0), pi_iar=-1e6).iar == pytest.approx(1.0, abs=1e-8)


def test_risk_monotone_and_complementary():
    p = SkewTParams(2.0, 1.0, -2.0, 4.0)
    grid = np.linspace(-5, 10, 61)
    iar = np.array([risk(p, pi, pi).iar for pi in grid])
    dar = np.array([risk(p, pi, pi).dar for pi in grid])
    assert np.all(np.diff(iar) <= 1e-12) and np.all(np.diff(dar) >= -1e-12)
    np.testing.assert_allclose(iar + dar, 1.0, atol=1e-8)
    assert np.all((iar >= 0) & (iar <= 1))
