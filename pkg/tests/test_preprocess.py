from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from inflrisk.errors import DegenerateSeries, TooShort
from inflrisk.ingest import CountryMeta, InflationPanel
from inflrisk.preprocess import clean_outliers, deseasonalize, preprocess_panel, seasonal_f_test


def test_white_noise_leaves_series_alone(rng):
    for _ in range(10):
        y = rng.standard_normal(144)
        adj, sa = deseasonalize(y, restarts=2)
        assert sa.hyperparams["seasonal"] < 0.05 * np.var(y)
        assert np.max(np.abs(sa.seasonal_component)) < 0.05 * np.std(y)
        assert all(v >= 0 for v in sa.hyperparams.values())


def test_dummy_pattern_is_removed(rng):
    pattern = np.array([3, -2, 1, 0, 4, -3, 2, -1, 0, -4, 1, -1], float)
    pattern -= pattern.mean()
    y = 2.0 + np.tile(pattern, 12) + 0.05 * rng.standard_normal(144)
    adj, sa = deseasonalize(y, restarts=2)
    assert sa.applied
    crit = stats.f.ppf(0.95, 11, y.size - 12)
    assert seasonal_f_test(adj)[0] < crit
    # reconstruction and the zero-sum property of the seasonal component
    np.testing.assert_allclose(adj + sa.seasonal_component, y, atol=1e-8)
    q75, q25 = np.percentile(y, [75, 25])
    sums = np.convolve(sa.seasonal_component, np.ones(12), "valid")
    assert np.max(np.abs(sums)) < 0.1 * (q75 - q25)


def test_constant_series_is_unchanged():
    y = np.full(48, 2.5)
    adj, sa = deseasonalize(y)
    assert np.array_equal(adj, y)
    assert not np.any(sa.seasonal_component)


def test_too_short():
    with pytest.raises(TooShort):
        deseasonalize(np.arange(35.0))


def test_outlier_replacement_is_anchored_at_the_median():
    y = np.array([1.0, 1.5, 1.5, 1.5, 2.0, 2.0, 2.0, 2.5, 2.5, 2.5, 3.0, 20.0])
    med = np.median(y)
    q75, q25 = np.percentile(y, [75, 25])
    assert med == 2.0
    cleaned, rep = clean_outliers(y)
    iqr = q75 - q25
    assert cleaned[-1] == pytest.approx(med + 10 * iqr)
    assert len(rep) == 1 and rep.entries[0][0] == 11 and rep.entries[0][1] == 20.0


def test_median_iqr_example_exact():
    y = np.concatenate([np.full(50, 1.5), np.full(51, 2.0), np.full(50, 2.5), [20.0]])
    # median 2, IQR 1 up to the single outlier
    med, (q75, q25) = np.median(y), np.percentile(y, [75, 25])
    cleaned, rep = clean_outliers(y)
    assert (med, q75 - q25) == (2.0, 1.0)
    assert cleaned[-1] == 12.0


def test_no_outliers_and_boundary():
    y = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    cleaned, rep = clean_outliers(y)
    assert np.array_equal(cleaned, y) and len(rep) == 0
    # median 2 and IQR 1, with one value exactly on the fence
    edge = np.concatenate([np.full(50, 1.5), np.full(51, 2.0), np.full(50, 2.5), [12.0]])
    assert np.median(edge) == 2.0 and np.subtract(*np.percentile(edge, [75, 25])) == 1.0
    cleaned, rep = clean_outliers(edge)
    assert np.array_equal(cleaned, edge) and len(rep) == 0


def test_degenerate_series():
    with pytest.raises(DegenerateSeries):
        clean_outliers(np.array([1.0, 1.0, 1.0, 1.0, 5.0]))


@settings(max_examples=100, deadline=None)
@given(arrays(float, st.integers(8, 60), elements=st.floats(-1e3, 1e3)))
def test_outlier_invariants(y):
    q75, q25 = np.percentile(y, [75, 25])
    if q75 - q25 <= 0:
        return
    med, iqr = np.median(y), q75 - q25
    once, rep = clean_outliers(y)
    for t, orig, repl in rep.entries:
        assert abs(orig - med) > 10 * iqr
        assert abs(repl - med) == pytest.approx(10 * iqr, rel=1e-12, abs=1e-12)
    twice, rep2 = clean_outliers(once)
    np.testing.assert_array_equal(once, twice)
    assert np.median(once) == pytest.approx(med, rel=1e-12, abs=1e-12)


def test_panel_driver_is_deterministic_and_parallel_safe(rng):
    T = 60
    meta = tuple(CountryMeta(c, "", "Asia", "LI") for c in ("AAA", "BBB", "CCC"))
    vals = rng.standard_normal((T, 3)) + np.tile(np.sin(np.arange(12)), T // 12)[:, None] * np.array([0, 2, 0])
    vals[10, 2] = 80.0
    panel = InflationPanel(pd.period_range("2001-01", periods=T, freq="M"), vals, meta, "raw")
    d1, c1, a1, r1 = preprocess_panel(panel, restarts=2, seed=3)
    d2, c2, a2, r2 = preprocess_panel(panel, restarts=2, seed=3, jobs=2)
    np.testing.assert_array_equal(c1.values, c2.values)
    assert c1.stage == "cleaned" and d1.stage == "deseasonalized"
    assert a1[1].applied and not a1[0].applied
    assert len(r1[2]) == 1 and r1[2].entries[0][0] == 10
