"""Loading CPI panels and country metadata, and turning prices into inflation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DuplicateCountry,
    MissingValue,
    NonPositivePrice,
    UnbalancedPanel,
    UnknownIncome,
    UnknownRegion,
    ValidationError,
)

log = logging.getLogger(__name__)

REGIONS = ("Africa", "America", "Asia", "Europe")
INCOMES = ("ADV", "MHI", "LI")
STAGES = ("raw", "deseasonalized", "cleaned")


@dataclass(frozen=True)
class CountryMeta:
    code: str
    name: str
    region: str
    income: str

    def __post_init__(self):
        if self.region not in REGIONS:
            raise UnknownRegion(f"{self.code}: unknown region {self.region!r}")
        if self.income not in INCOMES:
            raise UnknownIncome(f"{self.code}: unknown income group {self.income!r}")


def _check_meta(meta: Sequence[CountryMeta]) -> None:
    seen = set()
    for m in meta:
        if m.code in seen:
            raise DuplicateCountry(f"country {m.code} listed twice")
        seen.add(m.code)


def _check_dates(dates: pd.PeriodIndex) -> None:
    if len(dates) > 1 and not np.all(np.diff(dates.asi8) == 1):
        raise UnbalancedPanel("dates must increase by exactly one calendar month")


@dataclass(frozen=True, eq=False)
class RawCpiPanel:
    """CPI index levels, shape (T+1, N), columns in metadata order."""

    dates: pd.PeriodIndex
    values: np.ndarray
    meta: tuple[CountryMeta, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape != (len(self.dates), len(self.meta)):
            raise ValidationError(
                f"values shape {vals.shape} does not match "
                f"{len(self.dates)} dates x {len(self.meta)} countries"
            )
        if np.isnan(vals).any():
            raise MissingValue("CPI panel contains missing values")
        _check_meta(self.meta)
        _check_dates(self.dates)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def codes(self) -> list[str]:
        return [m.code for m in self.meta]

    def drop(self, codes: Iterable[str]) -> "RawCpiPanel":
        drop = set(codes)
        keep = [j for j, m in enumerate(self.meta) if m.code not in drop]
        return RawCpiPanel(
            self.dates, self.values[:, keep], tuple(self.meta[j] for j in keep)
        )


@dataclass(frozen=True, eq=False)
class InflationPanel:
    """Annualized month-on-month inflation (percent per year), shape (T, N)."""

    dates: pd.PeriodIndex
    values: np.ndarray
    meta: tuple[CountryMeta, ...]
    stage: str = "raw"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape != (len(self.dates), len(self.meta)):
            raise ValidationError(
                f"values shape {vals.shape} does not match "
                f"{len(self.dates)} dates x {len(self.meta)} countries"
            )
        if not np.isfinite(vals).all():
            raise MissingValue("inflation panel contains missing or infinite values")
        if self.stage not in STAGES:
            raise ValidationError(f"unknown stage {self.stage!r}")
        _check_meta(self.meta)
        _check_dates(self.dates)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def codes(self) -> list[str]:
        return [m.code for m in self.meta]

    def advance(self, values: np.ndarray, stage: str) -> "InflationPanel":
        """Return a copy at a later processing stage."""
        if STAGES.index(stage) <= STAGES.index(self.stage):
            raise ValidationError(f"cannot move from stage {self.stage} to {stage}")
        return InflationPanel(self.dates, values, self.meta, stage)

    def window(self, start: int, stop: int) -> "InflationPanel":
        return InflationPanel(
            self.dates[start:stop], self.values[start:stop], self.meta, self.stage
        )

    def drop(self, codes: Iterable[str]) -> "InflationPanel":
        drop = set(codes)
        keep = [j for j, m in enumerate(self.meta) if m.code not in drop]
        return InflationPanel(
            self.dates, self.values[:, keep], tuple(self.meta[j] for j in keep), self.stage
        )

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.values, columns=self.codes)
        df.insert(0, "date", self.dates.strftime("%Y-%m"))
        return df


# ---------------------------------------------------------------------------
# CSV I/O


def _read_csv(path: str | Path) -> pd.DataFrame:
    # keep_default_na=False so that only genuinely empty cells count as missing
    return pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])


def load_meta(meta_path: str | Path) -> tuple[CountryMeta, ...]:
    df = _read_csv(meta_path)
    missing = {"code", "name", "region", "income"} - set(df.columns)
    if missing:
        raise ValidationError(f"metadata file lacks columns {sorted(missing)}")
    if df[["code", "region", "income"]].isna().any().any():
        raise MissingValue("metadata file has empty cells")
    meta = tuple(
        CountryMeta(r.code.strip(), "" if pd.isna(r.name) else str(r.name).strip(),
                    r.region.strip(), r.income.strip())
        for r in df.itertuples(index=False)
    )
    _check_meta(meta)
    return meta


def _parse_dates(col: pd.Series) -> pd.PeriodIndex:
    try:
        return pd.PeriodIndex(pd.to_datetime(col, format="%Y-%m"), freq="M")
    except (ValueError, TypeError) as exc:
        raise ValidationError(f"dates must be formatted YYYY-MM: {exc}") from None


def _wide_from_long(df: pd.DataFrame) -> pd.DataFrame:
    if df.isna().any().any():
        raise MissingValue("long-format prices file has empty cells")
    if df.duplicated(["date", "code"]).any():
        raise DuplicateCountry("duplicate (date, code) rows in long-format prices")
    wide = df.pivot(index="date", columns="code", values="value")
    if wide.isna().any().any():
        bad = wide.columns[wide.isna().any()].tolist()
        raise UnbalancedPanel(f"ragged date coverage for {bad}")
    return wide.reset_index()


def load_panel(
    prices_path: str | Path,
    meta_path: str | Path,
    exclude: Iterable[str] = (),
) -> RawCpiPanel:
    """Read a wide or long prices CSV plus metadata into a validated panel.

    Columns are realigned to the metadata order; price columns for countries
    not listed in the metadata are ignored.
    """
    meta = load_meta(meta_path)
    exclude = set(exclude)
    if exclude:
        meta = tuple(m for m in meta if m.code not in exclude)

    df = _read_csv(prices_path)
    if "date" not in df.columns:
        raise ValidationError("prices file must have a 'date' column")
    if set(df.columns) == {"date", "code", "value"}:
        df = _wide_from_long(df)
    if df["date"].duplicated().any():
        raise UnbalancedPanel("duplicate dates in prices file")

    codes = [m.code for m in meta]
    cols = [c for c in df.columns if c != "date"]
    if len(set(cols)) != len(cols):
        raise DuplicateCountry("duplicate country columns in prices file")
    absent = [c for c in codes if c not in cols]
    if absent:
        raise UnbalancedPanel(f"no prices for {absent}")
    extra = sorted(set(cols) - set(codes) - exclude)
    if extra:
        log.info("ignoring %d price columns not in metadata: %s", len(extra), extra)

    block = df[codes]
    if block.isna().any().any():
        where = block.columns[block.isna().any()].tolist()
        raise MissingValue(f"empty cells for {where}")
    try:
        values = block.astype(float).to_numpy()
    except ValueError as exc:
        raise ValidationError(f"non-numeric price: {exc}") from None
    if np.isnan(values).any():
        raise MissingValue("NaN prices")

    dates = _parse_dates(df["date"])
    order = np.argsort(dates.asi8, kind="stable")
    return RawCpiPanel(dates[order], values[order], meta)


def write_prices(panel: RawCpiPanel, path: str | Path) -> None:
    df = pd.DataFrame(panel.values, columns=panel.codes)
    df.insert(0, "date", panel.dates.strftime("%Y-%m"))
    # 17 significant digits so that a reload is bit-exact
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def write_meta(meta: Sequence[CountryMeta], path: str | Path) -> None:
    pd.DataFrame(
        [(m.code, m.name, m.region, m.income) for m in meta],
        columns=["code", "name", "region", "income"],
    ).to_csv(path, index=False, lineterminator="\n")


def write_inflation(panel: InflationPanel, path: str | Path) -> None:
    panel.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def read_inflation(
    path: str | Path, meta: Sequence[CountryMeta], stage: str = "cleaned"
) -> InflationPanel:
    df = _read_csv(path)
    codes = [m.code for m in meta]
    absent = [c for c in codes if c not in df.columns]
    if absent:
        raise UnbalancedPanel(f"no inflation series for {absent}")
    if df[codes].isna().any().any():
        raise MissingValue("inflation file has empty cells")
    return InflationPanel(
        _parse_dates(df["date"]), df[codes].astype(float).to_numpy(), tuple(meta), stage
    )


def cpi_to_inflation(panel: RawCpiPanel) -> InflationPanel:
    """Annualized month-on-month inflation, ``1200 * diff(log CPI)``."""
    if (panel.values <= 0).any():
        raise NonPositivePrice("CPI levels must be strictly positive")
    if len(panel.dates) < 2:
        raise ValidationError("need at least two months of CPI levels")
    infl = 1200.0 * np.diff(np.log(panel.values), axis=0)
    return InflationPanel(panel.dates[1:], infl, panel.meta, "raw")
