from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

import oracles
from inflrisk.errors import ValidationError, WindowTooLarge, WrongGridLength
from inflrisk.evaluate import (
    SplitConfig,
    crps,
    dm_test,
    fluctuation_critical_value,
    fluctuation_test,
    load_fluctuation_table,
    model_grid,
    model_regressors,
    newey_west_var,
    quantile_score,
    rolling_forecast,
    rolling_forecasts,
    simulate_fluctuation_cv,
)
from inflrisk.ingest import INCOMES, REGIONS, InflationPanel
from inflrisk.mldfm import build_block_structure
from inflrisk.qr import empirical_quantile
from inflrisk.synthetic import default_meta, simulate_inflation_panel

TAUS = (0.05, 0.25, 0.5, 0.75, 0.95)


def test_quantile_score_examples(rng):
    assert quantile_score([1.0], [3.0], 0.5) == pytest.approx(1.0)
    y = rng.standard_normal(40)
    assert quantile_score(y, y, 0.9) == 0.0
    q = y + rng.standard_normal(40)
    for tau in TAUS:
        v = quantile_score(q, y, tau)
        assert v >= 0
        assert v == pytest.approx(oracles.quantile_score(q, y, tau), rel=1e-12)
        assert quantile_score(q + 7.5, y + 7.5, tau) == pytest.approx(v, rel=1e-12)


def test_crps_examples(rng):
    ones = np.ones(5)
    assert crps(ones, "E") == 1.0
    # (0.05^2 + 0.25^2 + 0.5^2 + 0.75^2 + 0.95^2) / 5 = 1.78 / 5
    assert crps(ones, "R") == pytest.approx(0.356, abs=1e-15)
    assert crps(ones, "L") == pytest.approx(0.356, abs=1e-15)
    qs = rng.uniform(0, 2, 5)
    assert crps(qs, "E") == pytest.approx(np.mean(qs), abs=1e-12)
    for w in "ELR":
        assert crps(qs, w) == pytest.approx(oracles.crps(qs, w), abs=1e-12)
    with pytest.raises(WrongGridLength):
        crps(np.ones(4), "E")
    with pytest.raises(ValidationError):
        crps(ones, "X")


def test_newey_west_matches_statsmodels(rng):
    for P in (12, 50, 132):
        d = rng.standard_normal(P).cumsum() * 0.1 + rng.standard_normal(P)
        lag = int(np.floor(P ** (1 / 3)))
        assert newey_west_var(d) == pytest.approx(oracles.newey_west_mean_var(d, lag), rel=1e-10)
        stat, p = dm_test(d)
        s_ref, p_ref = oracles.dm_statistic(d)
        assert stat == pytest.approx(s_ref, rel=1e-10) and p == pytest.approx(p_ref, rel=1e-10)


def test_dm_examples(rng):
    assert dm_test(np.zeros(30)) == (0.0, 0.5)
    stat, p = dm_test(-1.0 + 1e-3 * rng.standard_normal(60))
    assert p < 1e-3 and stat < 0
    d = rng.standard_normal(80)
    assert dm_test(3.7 * d)[0] == pytest.approx(dm_test(d)[0], rel=1e-12)
    s, p_less = dm_test(d)
    assert dm_test(d, "greater")[1] == pytest.approx(1 - p_less)
    assert 0 < p_less < 1
    with pytest.raises(ValidationError):
        dm_test(np.ones(5))


def test_fluctuation_examples(rng):
    res = fluctuation_test(np.zeros(100), 30)
    assert not np.any(res.path) and not res.rejects
    P = 132
    d = np.concatenate([0.3 * rng.standard_normal(P // 2), -2.0 + 0.3 * rng.standard_normal(P - P // 2)])
    res = fluctuation_test(d, int(0.3 * P))
    assert res.mu == pytest.approx(0.3)
    crossed = res.end[np.abs(res.path) > res.cv]
    assert crossed.size > 0 and np.all(crossed >= P // 2)
    np.testing.assert_allclose(res.path, oracles.fluctuation_path(d, res.m, res.sigma), rtol=1e-10)
    with pytest.raises(WindowTooLarge):
        fluctuation_test(d, P)


def test_fluctuation_table_is_editable_data(tmp_path):
    table = load_fluctuation_table()
    assert list(table["mu"]) == pytest.approx(np.arange(1, 10) / 10)
    assert fluctuation_critical_value(0.33)[0] == pytest.approx(0.3)
    edited = table.copy()
    edited["alpha_0.05"] = 1.0
    path = tmp_path / "cv.csv"
    edited.to_csv(path, index=False)
    assert fluctuation_critical_value(0.5, table=load_fluctuation_table(path))[1] == 1.0


def test_fluctuation_table_agrees_with_simulation():
    sim = simulate_fluctuation_cv(mus=(0.3, 0.7), n=500, reps=4000, seed=1)
    table = load_fluctuation_table().set_index("mu")
    for mu, v in zip(sim["mu"], sim["alpha_0.05"]):
        assert v == pytest.approx(table.loc[round(mu, 1), "alpha_0.05"], rel=0.06)


def test_split_config():
    assert SplitConfig.parse("155:132") == SplitConfig(155, 132)
    with pytest.raises(ValidationError):
        SplitConfig(59, 10)
    with pytest.raises(ValidationError):
        SplitConfig.parse("155-132")
    with pytest.raises(ValidationError):
        SplitConfig(60, 10).check(70)
    assert SplitConfig(60, 10).check(75) == 4


def test_model_regressors(meta_small):
    st = build_block_structure(meta_small)
    i = next(j for j, m in enumerate(meta_small) if (m.region, m.income) == ("Europe", "ADV"))
    assert model_regressors("M1", st, i) == ("lag", "F_g", "F_Eu", "F_Ad")
    assert model_regressors("M2", st, i) == ("lag", "F_g", "F_Eu")
    assert model_regressors("M3", st, i) == ("lag", "F_g", "F_Ad")
    assert model_regressors("M4", st, i) == ("lag", "F_g")
    assert model_regressors("M5", st, i) == ()
    assert model_regressors("AR_QR", st, i) == ("lag",)
    with pytest.raises(ValidationError):
        model_regressors("M9", st, i)


@pytest.fixture(scope="module")
def short_panel(meta_small):
    return simulate_inflation_panel(meta_small, T=62, rng=np.random.default_rng(8))[0]


def test_minimal_split_gives_one_vintage(short_panel):
    st = build_block_structure(short_panel.meta)
    fcs, vf = rolling_forecasts(short_panel, st, ["M1", "M5", "AR_QR"], SplitConfig(60, 1))
    for fc in fcs.values():
        assert fc.q.shape == (1, short_panel.N, 5)
        assert np.all(np.isfinite(fc.q))
        assert str(fc.dates[0]) == str(short_panel.dates[-1])
    assert len(vf) == 1 and vf[0].factors.shape == (61, 8)


def test_constant_model_forecasts_the_window_quantile(short_panel):
    st = build_block_structure(short_panel.meta)
    fc = rolling_forecast(short_panel, st, "M5", SplitConfig(60, 1))
    window = short_panel.values[1:61]
    for i in range(short_panel.N):
        for k, tau in enumerate(TAUS):
            pts, best = oracles.empirical_quantile_set(window[:, i], tau)
            assert fc.q[0, i, k] in pts
            assert fc.q[0, i, k] == empirical_quantile(window[:, i], tau)


def test_forecasts_use_only_the_window(short_panel):
    st = build_block_structure(short_panel.meta)
    a = rolling_forecast(short_panel, st, "M1", SplitConfig(60, 1))
    vals = short_panel.values.copy()
    vals[-1] += 100.0  # the realized target must not feed the forecast
    other = InflationPanel(short_panel.dates, vals, short_panel.meta, short_panel.stage)
    b = rolling_forecast(other, st, "M1", SplitConfig(60, 1))
    np.testing.assert_array_equal(a.q, b.q)
    assert b.y[0, 0] == a.y[0, 0] + 100.0


def test_benchmark_only_ratios_are_one(panel_small):
    st = build_block_structure(panel_small.meta)
    rep = model_grid(panel_small, st, SplitConfig(60, 30), models=("AR_QR",))
    cols = [c for c in rep.scores.columns if c.startswith("ratio_")]
    np.testing.assert_array_equal(rep.scores[cols].to_numpy(), 1.0)
    assert np.all(rep.scores["QS"] >= 0)


def test_model_grid_and_vintage_stability(panel_small):
    st = build_block_structure(panel_small.meta)
    split = SplitConfig(80, 39)
    rep = model_grid(panel_small, st, split, models=("M1", "M4", "MB"))
    s = rep.scores
    assert set(s["model"]) == {"M1", "M4", "MB", "AR_QR"}
    assert len(s) == 4 * panel_small.N * 5
    ratios = s[[c for c in s.columns if c.startswith("ratio_")]].to_numpy()
    assert np.all(ratios[np.isfinite(ratios)] > 0)
    p = s["dm_p"].to_numpy()
    assert np.all((p > 0) & (p < 1))
    assert set(rep.summary["group"]) >= {"all", "Europe", "LI"}
    assert len(rep.fluctuation) > 0


def test_vintage_factors_are_stable():
    # a well-identified factor DGP on the full classification, so that every
    # block has enough members to pin its factor down
    meta = default_meta()
    groups = [(REGIONS.index(m.region) + 1, INCOMES.index(m.income) + 1) for m in meta]
    X, *_ = oracles.mldfm_panel(groups, 100, 0.5, np.random.default_rng(0))
    panel = InflationPanel(pd.period_range("2000-01", periods=100, freq="M"), X, meta, "cleaned")
    st = build_block_structure(meta)
    _, vf = rolling_forecasts(panel, st, ["M4", "AR_QR"], SplitConfig(80, 8), taus=(0.5,))
    assert len(vf) == 8
    for a, b in zip(vf[:-1], vf[1:]):
        assert b.date == a.date + 1
        for k in range(8):
            assert abs(np.corrcoef(a.factors[1:, k], b.factors[:-1, k])[0, 1]) > 0.9


def test_no_spurious_predictability(meta_small):
    panel, _ = simulate_inflation_panel(meta_small, T=121, rng=np.random.default_rng(21),
                                        factor_effect=0.0, tail_effect=0.0)
    st = build_block_structure(meta_small)
    rep = model_grid(panel, st, SplitConfig(60, 60), models=("M1",))
    s = rep.scores[(rep.scores["model"] == "M1")]
    rejections = (s.groupby("code")["dm_p_CRPS_E"].first() < 0.10).mean()
    # a nominal 10% test across 31 series: well below a genuine-effect share
    assert rejections <= 0.2
