"""Synthetic panels for tests, demos and the acceptance suite."""

from __future__ import annotations

from importlib import resources

import numpy as np
import pandas as pd

from .ingest import CountryMeta, InflationPanel, RawCpiPanel
from .mldfm import BlockStructure, build_block_structure


def default_meta() -> tuple[CountryMeta, ...]:
    """The 115-country classification shipped with the package."""
    with resources.files("inflrisk").joinpath("data/countries.csv").open() as fh:
        df = pd.read_csv(fh, dtype=str, keep_default_na=False)
    return tuple(CountryMeta(r.code, r.name, r.region, r.income) for r in df.itertuples())


def orthonormal_factors(T: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """K columns with unit Euclidean norm that are mutually orthogonal."""
    Q, R = np.linalg.qr(rng.standard_normal((T, K)))
    return Q * np.sign(np.diag(R))


def simulate_mldfm(
    meta=None,
    T: int = 288,
    noise_sd: float = 0.5,
    rng: np.random.Generator | None = None,
    factor_ar: float = 0.0,
    loading_scale=1.0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, BlockStructure]:
    """Draw ``X = F L' + e`` with the region/income zero pattern.

    Factors have unit variance (``sqrt(T)`` times orthonormal columns, so
    they are exactly orthogonal in sample).  With ``factor_ar > 0`` the
    factors are AR(1) before orthonormalization.  ``loading_scale`` may be a
    scalar or one value per factor.

    Returns (X, F, L, structure) with ``F`` of unit Euclidean norm.
    """
    rng = rng or np.random.default_rng()
    meta = tuple(meta) if meta is not None else default_meta()
    structure = build_block_structure(meta)
    N, K = structure.mask.shape
    if factor_ar:
        raw = np.zeros((T, K))
        e = rng.standard_normal((T, K))
        raw[0] = e[0]
        for t in range(1, T):
            raw[t] = factor_ar * raw[t - 1] + e[t]
        raw -= raw.mean(axis=0)
        Q, R = np.linalg.qr(raw)
        F = Q * np.sign(np.diag(R))
    else:
        F = orthonormal_factors(T, K, rng)
    L = rng.standard_normal((N, K)) * np.asarray(loading_scale, dtype=float) * structure.mask
    X = np.sqrt(T) * F @ L.T + noise_sd * rng.standard_normal((T, N))
    return X, F, L, structure


def simulate_inflation_panel(
    meta=None,
    T: int = 288,
    start: str = "1999-01",
    rng: np.random.Generator | None = None,
    factor_effect: float = 1.0,
    noise_sd: float = 1.0,
    rho: float = 0.9,
    tail_effect: float = 1.0,
) -> tuple[InflationPanel, np.ndarray]:
    """An inflation-like panel whose upper tail is driven by ML-DFM factors.

    ``y[t] = 2 + b'f[t] + e[t]`` with AR(``rho``) unit-variance factors, so
    today's factors predict tomorrow's centre.  The noise is Student-t(5)
    with its right half scaled by ``1 + tail_effect * max(b'f[t-1], 0)``,
    so the factors also widen the right tail.  ``factor_effect = 0`` gives
    a panel without common structure.  Returns the panel and the true
    factors.
    """
    rng = rng or np.random.default_rng()
    meta = tuple(meta) if meta is not None else default_meta()
    structure = build_block_structure(meta)
    N, K = structure.mask.shape
    F = np.zeros((T, K))
    e = rng.standard_normal((T, K))
    F[0] = e[0]
    for t in range(1, T):
        F[t] = rho * F[t - 1] + np.sqrt(1.0 - rho**2) * e[t]
    B = factor_effect * np.abs(rng.normal(1.0, 0.3, size=(N, K))) * structure.mask
    common = F @ B.T
    u = noise_sd * rng.standard_t(5, size=(T, N))
    scale = np.ones((T, N))
    scale[1:] += tail_effect * np.maximum(common[:-1], 0.0)
    y = 2.0 + common + np.where(u > 0, scale * u, u)
    dates = pd.period_range(start, periods=T, freq="M")
    return InflationPanel(dates, y, meta, "cleaned"), F


def inflation_to_cpi(panel: InflationPanel, base: float = 100.0) -> RawCpiPanel:
    """Invert the annualized log-difference transform."""
    logp = np.vstack([np.zeros(panel.N), np.cumsum(panel.values / 1200.0, axis=0)])
    dates = pd.period_range(panel.dates[0] - 1, periods=panel.T + 1, freq="M")
    return RawCpiPanel(dates, base * np.exp(logp), panel.meta)
