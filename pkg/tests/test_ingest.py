from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inflrisk.errors import (
    DuplicateCountry,
    MissingValue,
    NonPositivePrice,
    UnbalancedPanel,
    UnknownIncome,
    UnknownRegion,
    ValidationError,
)
from inflrisk.ingest import (
    CountryMeta,
    InflationPanel,
    RawCpiPanel,
    cpi_to_inflation,
    load_meta,
    load_panel,
    read_inflation,
    write_inflation,
    write_meta,
    write_prices,
)

META = "code,name,region,income\nAAA,Aland,Europe,ADV\nBBB,Bland,Africa,LI\n"


def _write(tmp_path, prices: str, meta: str = META):
    p, m = tmp_path / "prices.csv", tmp_path / "meta.csv"
    p.write_text(prices)
    m.write_text(meta)
    return p, m


def test_minimal_wide_panel(tmp_path):
    p, m = _write(tmp_path, "date,BBB,AAA\n2000-01,100,50\n2000-02,101,51\n2000-03,102,52\n2000-04,103,53\n")
    raw = load_panel(p, m)
    assert raw.values.shape == (4, 2)
    # realigned to metadata order
    assert raw.codes == ["AAA", "BBB"]
    assert raw.values[0].tolist() == [50.0, 100.0]


def test_long_format_is_pivoted(tmp_path):
    rows = ["date,code,value"] + [f"2000-0{t},{c},{v + t}" for t in range(1, 4) for c, v in (("AAA", 10), ("BBB", 20))]
    p, m = _write(tmp_path, "\n".join(rows) + "\n")
    raw = load_panel(p, m)
    assert raw.values[:, 1].tolist() == [21.0, 22.0, 23.0]


def test_empty_cell_raises(tmp_path):
    p, m = _write(tmp_path, "date,AAA,BBB\n2000-01,100,50\n2000-02,,51\n")
    with pytest.raises(MissingValue):
        load_panel(p, m)


def test_ragged_long_panel_raises(tmp_path):
    p, m = _write(tmp_path, "date,code,value\n2000-01,AAA,1\n2000-02,AAA,2\n2000-01,BBB,3\n")
    with pytest.raises(UnbalancedPanel):
        load_panel(p, m)


def test_missing_country_column_raises(tmp_path):
    p, m = _write(tmp_path, "date,AAA\n2000-01,100\n2000-02,101\n")
    with pytest.raises(UnbalancedPanel):
        load_panel(p, m)


def test_bad_enums_and_duplicates(tmp_path):
    p, _ = _write(tmp_path, "date,AAA\n2000-01,1\n2000-02,2\n")
    bad = tmp_path / "bad.csv"
    bad.write_text("code,name,region,income\nAAA,A,Oceania,ADV\n")
    with pytest.raises(UnknownRegion):
        load_meta(bad)
    bad.write_text("code,name,region,income\nAAA,A,Europe,HIGH\n")
    with pytest.raises(UnknownIncome):
        load_meta(bad)
    bad.write_text("code,name,region,income\nAAA,A,Europe,ADV\nAAA,B,Asia,LI\n")
    with pytest.raises(DuplicateCountry):
        load_meta(bad)


def test_gapped_dates_raise(tmp_path):
    p, m = _write(tmp_path, "date,AAA,BBB\n2000-01,1,1\n2000-03,2,2\n")
    with pytest.raises(ValidationError):
        load_panel(p, m)


def test_exclude_drops_countries(tmp_path):
    p, m = _write(tmp_path, "date,AAA,BBB\n2000-01,1,1\n2000-02,2,2\n")
    raw = load_panel(p, m, exclude=["BBB"])
    assert raw.codes == ["AAA"]


def _raw(values, start="2000-01"):
    values = np.asarray(values, float)
    meta = tuple(CountryMeta(f"C{j:02d}", "", "Europe", "ADV") for j in range(values.shape[1]))
    return RawCpiPanel(pd.period_range(start, periods=values.shape[0], freq="M"), values, meta)


def test_inflation_examples():
    infl = cpi_to_inflation(_raw([[100, 100, 100], [100, 101, 100 * np.exp(0.01)]]))
    assert infl.values[0, 0] == 0.0
    assert infl.values[0, 1] == pytest.approx(1200 * np.log(1.01), abs=1e-12)
    assert infl.values[0, 1] == pytest.approx(11.940, abs=1e-3)
    assert infl.values[0, 2] == pytest.approx(12.0, abs=1e-12)
    assert infl.stage == "raw"
    assert infl.T == 1


def test_nonpositive_price_raises():
    with pytest.raises(NonPositivePrice):
        cpi_to_inflation(_raw([[100.0], [0.0]]))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.5, 2.0), min_size=13, max_size=40),
    st.floats(1e-3, 1e3),
)
def test_scale_invariance_and_annual_sum(growth, c):
    cpi = 100 * np.cumprod(np.asarray(growth))[:, None]
    a = cpi_to_inflation(_raw(cpi)).values
    b = cpi_to_inflation(_raw(c * cpi)).values
    np.testing.assert_allclose(a, b, atol=1e-9 * max(1.0, np.abs(a).max()))
    annual = 100 * (np.log(cpi[12:, 0]) - np.log(cpi[:-12, 0]))
    rolled = np.convolve(a[:, 0], np.ones(12), "valid")[: annual.size] / 12
    np.testing.assert_allclose(rolled, annual, atol=1e-10 * max(1.0, np.abs(annual).max()))


def test_serialization_round_trip_is_bit_exact(tmp_path, rng):
    raw = _raw(100 * np.exp(np.cumsum(rng.normal(0, 0.01, (30, 3)), axis=0)))
    write_prices(raw, tmp_path / "p.csv")
    write_meta(raw.meta, tmp_path / "m.csv")
    back = load_panel(tmp_path / "p.csv", tmp_path / "m.csv")
    assert np.array_equal(back.values, raw.values)
    assert back.meta == raw.meta
    infl = cpi_to_inflation(raw)
    write_inflation(infl, tmp_path / "i.csv")
    again = read_inflation(tmp_path / "i.csv", raw.meta, "raw")
    assert np.array_equal(again.values, infl.values)


def test_stage_transitions_are_forward_only(rng):
    meta = (CountryMeta("AAA", "", "Asia", "LI"),)
    p = InflationPanel(pd.period_range("2000-01", periods=5, freq="M"), rng.normal(size=(5, 1)), meta, "raw")
    d = p.advance(p.values, "deseasonalized")
    c = d.advance(d.values, "cleaned")
    assert c.stage == "cleaned"
    with pytest.raises(ValidationError):
        c.advance(c.values, "raw")
    with pytest.raises(ValidationError):
        d.advance(d.values, "deseasonalized")
