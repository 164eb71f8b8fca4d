"""Seasonal adjustment with a basic structural model, and outlier clamping."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateSeries, InflRiskError, OptimizerFailure, TooShort
from .ingest import InflationPanel

log = logging.getLogger(__name__)

PERIOD = 12


@dataclass(frozen=True, eq=False)
class SeasonalAdjustment:
    seasonal_component: np.ndarray
    loglik: float
    # variances of the level, seasonal and irregular disturbances
    hyperparams: dict[str, float]
    converged: bool = True
    # p-value of the monthly-dummy F test used to gate the adjustment
    seasonal_pvalue: float = float("nan")
    applied: bool = True


@dataclass(frozen=True)
class OutlierReport:
    # (time index, original value, replacement value)
    entries: tuple[tuple[int, float, float], ...] = field(default_factory=tuple)
    median: float = float("nan")
    iqr: float = float("nan")

    def __len__(self):
        return len(self.entries)


def seasonal_f_test(x: np.ndarray) -> tuple[float, float]:
    """One-way ANOVA F test for equal monthly means."""
    x = np.asarray(x, dtype=float)
    groups = [x[m::PERIOD] for m in range(PERIOD)]
    if np.ptp(x) == 0:
        return 0.0, 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f, p = stats.f_oneway(*groups)
    if not np.isfinite(f):
        return 0.0, 1.0
    return float(f), float(p)


def _fit_bsm(y: np.ndarray, restarts: int, seed: int):
    import statsmodels.api as sm

    model = sm.tsa.UnobservedComponents(
        y, level="llevel", seasonal=PERIOD, stochastic_seasonal=True,
        use_exact_diffuse=True,
    )
    rng = np.random.default_rng(seed)
    var = float(np.var(y))
    starts = [np.asarray(model.start_params, dtype=float)]
    for _ in range(restarts - 1):
        starts.append(var * np.exp(rng.uniform(-6.0, 1.0, size=3)))

    best = None
    for sp in starts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                res = model.fit(start_params=sp, method="lbfgs", disp=False,
                                maxiter=500, pgtol=1e-6)
            except (np.linalg.LinAlgError, ValueError):
                continue
        if not np.isfinite(res.llf):
            continue
        if best is None or res.llf > best.llf:
            best = res
    return best


def deseasonalize(
    series: np.ndarray,
    restarts: int = 5,
    seed: int = 0,
    test_level: float | None = 0.01,
) -> tuple[np.ndarray, SeasonalAdjustment]:
    """Remove the smoothed seasonal state of a basic structural model.

    The model is local level + stochastic monthly dummy seasonal + irregular,
    with exact diffuse initialization; variances are estimated by maximum
    likelihood with ``restarts`` starting points. When ``test_level`` is set,
    the seasonal component is only subtracted if monthly dummies are jointly
    significant at that level in the level-adjusted series.
    """
    y = np.asarray(series, dtype=float)
    if y.ndim != 1 or y.size < 3 * PERIOD:
        raise TooShort(f"need at least {3 * PERIOD} observations, got {y.size}")

    if np.ptp(y) == 0:
        zero = np.zeros_like(y)
        hp = {"level": 0.0, "seasonal": 0.0, "irregular": 0.0}
        return y.copy(), SeasonalAdjustment(zero, float("nan"), hp, True, 1.0, False)

    res = _fit_bsm(y, restarts, seed)
    if res is None or not res.mle_retvals.get("converged", False):
        raise OptimizerFailure("structural model likelihood did not converge")

    p = dict(zip(res.model.param_names, np.asarray(res.params, dtype=float)))
    hp = {
        "level": max(p["sigma2.level"], 0.0),
        "seasonal": max(p["sigma2.seasonal"], 0.0),
        "irregular": max(p["sigma2.irregular"], 0.0),
    }
    seasonal = np.asarray(res.seasonal.smoothed, dtype=float)
    level = np.asarray(res.level.smoothed, dtype=float)
    _, pval = seasonal_f_test(y - level)
    applied = test_level is None or pval < test_level
    if not applied:
        seasonal = np.zeros_like(y)
    adj = SeasonalAdjustment(seasonal, float(res.llf), hp, True, pval, applied)
    return y - seasonal, adj


def clean_outliers(series: np.ndarray, k: float = 10.0) -> tuple[np.ndarray, OutlierReport]:
    """Clamp values further than ``k`` interquartile ranges from the median.

    Median and IQR are computed once on the input; flagged values are
    replaced by ``median + sign * k * IQR``.
    """
    y = np.asarray(series, dtype=float)
    med = float(np.median(y))
    q1, q3 = np.percentile(y, [25, 75])
    iqr = float(q3 - q1)
    if iqr <= 0:
        raise DegenerateSeries("interquartile range is zero")
    dev = y - med
    flagged = np.flatnonzero(np.abs(dev) > k * iqr)
    out = y.copy()
    out[flagged] = med + np.sign(dev[flagged]) * k * iqr
    entries = tuple((int(t), float(y[t]), float(out[t])) for t in flagged)
    return out, OutlierReport(entries, med, iqr)


def _process_one(args):
    y, restarts, seed, test_level, k, code = args
    try:
        adjusted, adj = deseasonalize(y, restarts=restarts, seed=seed, test_level=test_level)
        cleaned, report = clean_outliers(adjusted, k=k)
    except InflRiskError as exc:
        exc.context = {"code": code}
        raise
    return adjusted, adj, cleaned, report


def preprocess_panel(
    panel: InflationPanel,
    restarts: int = 5,
    seed: int = 0,
    test_level: float | None = 0.01,
    k: float = 10.0,
    jobs: int = 1,
) -> tuple[InflationPanel, InflationPanel, list[SeasonalAdjustment], list[OutlierReport]]:
    """Deseasonalize then outlier-clean every series.

    Returns the deseasonalized panel, the cleaned panel, and per-series
    adjustment and outlier reports (metadata order).
    """
    tasks = [
        (panel.values[:, j], restarts, seed + j, test_level, k, panel.codes[j])
        for j in range(panel.N)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_process_one, tasks))
    else:
        results = [_process_one(t) for t in tasks]
    adjusted = np.column_stack([r[0] for r in results])
    cleaned = np.column_stack([r[2] for r in results])
    deseas = panel.advance(adjusted, "deseasonalized")
    return deseas, deseas.advance(cleaned, "cleaned"), [r[1] for r in results], [r[3] for r in results]
