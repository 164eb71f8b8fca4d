"""Rolling-window out-of-sample evaluation of quantile forecasts.

Each vintage re-extracts the multi-level factors from the data available
in its window, refits every model's quantile regressions and records the
one-step-ahead quantile forecasts.  Forecasts are scored with the quantile
score and three weighted CRPS approximations, compared with the AR-QR
benchmark through Diebold-Mariano tests, and tracked over time with the
fluctuation test.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .density import DEFAULT_TAUS
from .errors import (
    InflRiskError,
    ValidationError,
    WindowTooLarge,
    WrongGridLength,
    ZeroVariance,
)
from .faqr import REGRESSORS, design, forecast_row, pvalues, sandwich_cov
from .ingest import INCOMES, REGIONS, InflationPanel
from .mldfm import BlockStructure, MLDFMConfig, estimate_mldfm
from .qr import fit_qr

log = logging.getLogger(__name__)

MODELS = ("M1", "M2", "M3", "M4", "M5", "MB", "AR_QR")
MODEL_LABELS = {
    "M1": "FAQR_full",
    "M2": "Global_Regional",
    "M3": "Global_Development",
    "M4": "Global_only",
    "M5": "Constant_only",
    "MB": "Significant_only",
    "AR_QR": "AR_QR",
}
BENCHMARK = "AR_QR"
COEF_NAMES = ("const",) + REGRESSORS
CRPS_WEIGHTS = {
    "E": lambda t: np.ones_like(t),
    "L": lambda t: (t - 1.0) ** 2,
    "R": lambda t: t**2,
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SplitConfig:
    """In-sample length ``R`` and number of forecasts ``P``.

    Both count regression observations (response months), so a panel of
    ``T`` months supports ``R + P <= T - 1``; when the sum is smaller the
    earliest months are dropped.
    """

    R: int
    P: int
    scheme: str = "rolling"

    def __post_init__(self):
        if self.scheme != "rolling":
            raise ValidationError(f"unsupported scheme {self.scheme!r}")
        if self.R < 60:
            raise ValidationError(f"in-sample length R={self.R} is below 60")
        if self.P < 1:
            raise ValidationError("P must be at least 1")

    @classmethod
    def parse(cls, text: str) -> "SplitConfig":
        try:
            r, p = (int(v) for v in text.split(":"))
        except ValueError:
            raise ValidationError(f"split must look like R:P, got {text!r}") from None
        return cls(r, p)

    def check(self, T: int) -> int:
        """Validate against a panel of ``T`` months and return the offset."""
        if self.R + self.P > T - 1:
            raise ValidationError(
                f"R + P = {self.R + self.P} exceeds the {T - 1} regression observations"
            )
        return T - 1 - self.R - self.P


def model_regressors(model: str, structure: BlockStructure, i: int, full: Sequence[str] | None = None) -> tuple[str, ...]:
    """Regressors (besides the intercept) of ``model`` for country ``i``."""
    allowed = structure.allowed(i)
    g = [n for n in allowed if structure.levels[structure.names.index(n)] == "global"]
    reg = [n for n in allowed if structure.levels[structure.names.index(n)] == "region"]
    inc = [n for n in allowed if structure.levels[structure.names.index(n)] == "income"]
    if model in ("M1", "MB"):
        return ("lag",) + tuple(allowed)
    if model == "M2":
        return ("lag",) + tuple(g + reg)
    if model == "M3":
        return ("lag",) + tuple(g + inc)
    if model == "M4":
        return ("lag",) + tuple(g)
    if model == "M5":
        return ()
    if model == "AR_QR":
        return ("lag",)
    raise ValidationError(f"unknown model {model!r}")


def uses_factors(model: str) -> bool:
    return model not in ("M5", "AR_QR")


# ---------------------------------------------------------------------------
# rolling forecasts


@dataclass(eq=False)
class ForecastSet:
    model: str
    taus: tuple[float, ...]
    codes: tuple[str, ...]
    dates: pd.PeriodIndex  # target month of each vintage
    q: np.ndarray  # (V, N, K) quantile forecasts, NaN where a fit failed
    y: np.ndarray  # (V, N) realized values
    theta: np.ndarray  # (V, N, K, len(COEF_NAMES)), NaN for excluded regressors
    failures: list = field(default_factory=list)  # (vintage date, code, tau, reason)

    @property
    def V(self) -> int:
        return self.q.shape[0]


@dataclass(eq=False)
class VintageFactors:
    date: pd.Period  # last in-sample month
    dates: pd.PeriodIndex
    factors: np.ndarray | None  # (R+1, 8) unit-variance factors
    converged: bool = True
    n_iter: int = 0
    error: str = ""


def _fit_one(yw, F, names, regs, tau):
    yy, X = design(yw, F, names, regs)
    fit = fit_qr(yy, X, tau, names=("const",) + tuple(regs))
    return fit


def _run_vintage(args):
    (Yw, structure, models, taus, mdl_cfg, mb_level, codes) = args
    N = Yw.shape[1]
    K = len(taus)
    F = None
    info = {"converged": True, "n_iter": 0, "error": ""}
    if any(uses_factors(m) for m in models):
        try:
            fs = estimate_mldfm(Yw, structure, mdl_cfg)
            F = fs.scaled()
            info.update(converged=fs.converged, n_iter=fs.n_iter)
        except (InflRiskError, np.linalg.LinAlgError) as exc:
            info["error"] = f"{type(exc).__name__}: {exc}"
    names = structure.names
    out = {}
    for m in models:
        q = np.full((N, K), np.nan)
        th = np.full((N, K, len(COEF_NAMES)), np.nan)
        fails = []
        for i in range(N):
            for k, tau in enumerate(taus):
                if uses_factors(m) and F is None:
                    fails.append((codes[i], tau, "factor extraction failed: " + info["error"]))
                    continue
                regs = model_regressors(m, structure, i)
                try:
                    fit = _fit_one(Yw[:, i], F, names, regs, tau)
                    if m == "MB":
                        fit = fit.with_(cov=sandwich_cov(fit))
                        pv = pvalues(fit)
                        regs = tuple(r for r, p in zip(regs, pv[1:]) if p < mb_level)
                        fit = _fit_one(Yw[:, i], F, names, regs, tau)
                except (InflRiskError, np.linalg.LinAlgError) as exc:
                    fails.append((codes[i], tau, f"{type(exc).__name__}: {exc}"))
                    continue
                row = forecast_row(Yw[-1, i], None if F is None else F[-1], names, regs)
                q[i, k] = row @ fit.theta
                for nm, val in zip(("const",) + tuple(regs), fit.theta):
                    th[i, k, COEF_NAMES.index(nm)] = val
        out[m] = (q, th, fails)
    return out, F, info


def rolling_forecasts(
    panel: InflationPanel,
    structure: BlockStructure,
    models: Iterable[str],
    split: SplitConfig,
    taus: Sequence[float] = DEFAULT_TAUS,
    mldfm_config: MLDFMConfig = MLDFMConfig(),
    mb_level: float = 0.10,
    jobs: int = 1,
) -> tuple[dict[str, ForecastSet], list[VintageFactors]]:
    """One-step-ahead quantile forecasts for every vintage and model.

    Vintage ``p`` uses the ``R + 1`` months ending at month ``v`` (``R``
    regression observations) and forecasts month ``v + 1``.  Factors are
    re-extracted from each window with window-specific standardization.
    """
    models = tuple(dict.fromkeys(models))
    for m in models:
        if m not in MODELS:
            raise ValidationError(f"unknown model {m!r}")
    taus = tuple(float(t) for t in taus)
    Y = panel.values
    offset = split.check(panel.T)
    R = split.R
    codes = tuple(panel.codes)
    last = [offset + R + p for p in range(split.P)]
    tasks = [(Y[v - R:v + 1], structure, models, taus, mldfm_config, mb_level, codes) for v in last]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_vintage, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_run_vintage(t) for t in tasks]

    N, K, V = panel.N, len(taus), split.P
    target = panel.dates[[v + 1 for v in last]]
    sets = {}
    for m in models:
        q = np.stack([r[0][m][0] for r in results])
        th = np.stack([r[0][m][1] for r in results])
        fails = [(target[j], c, t, why) for j, r in enumerate(results) for (c, t, why) in r[0][m][2]]
        for f in fails[:5]:
            log.warning("model %s vintage %s %s tau=%s skipped: %s", m, *f)
        if len(fails) > 5:
            log.warning("model %s: %d failed fits in total", m, len(fails))
        sets[m] = ForecastSet(m, taus, codes, target, q, Y[[v + 1 for v in last]], th, fails)
    vf = [
        VintageFactors(panel.dates[v], panel.dates[v - R:v + 1], r[1], r[2]["converged"], r[2]["n_iter"], r[2]["error"])
        for v, r in zip(last, results)
    ]
    return sets, vf


def rolling_forecast(panel, structure, model: str, split: SplitConfig, taus=DEFAULT_TAUS, **kw) -> ForecastSet:
    return rolling_forecasts(panel, structure, [model], split, taus, **kw)[0][model]


# ---------------------------------------------------------------------------
# scores and tests


def quantile_loss(q, y, tau) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    y = np.asarray(y, dtype=float)
    return ((y <= q).astype(float) - tau) * (q - y)


def quantile_score(q, y, tau) -> float:
    """Average tick loss over the finite forecasts."""
    loss = quantile_loss(q, y, tau)
    loss = loss[np.isfinite(loss)]
    if loss.size == 0:
        raise ValidationError("no finite forecasts to score")
    return float(loss.mean())


def crps_weights(taus: Sequence[float], weighting: str) -> np.ndarray:
    if weighting not in CRPS_WEIGHTS:
        raise ValidationError(f"weighting must be one of E, L, R; got {weighting!r}")
    return CRPS_WEIGHTS[weighting](np.asarray(taus, dtype=float))


def crps(qs_by_tau, weighting: str = "E", taus: Sequence[float] = DEFAULT_TAUS) -> float:
    """Weighted average of quantile scores on the five-point grid."""
    qs = np.asarray(qs_by_tau, dtype=float)
    if qs.shape != (5,) or len(taus) != 5:
        raise WrongGridLength(f"CRPS needs scores at 5 quantiles, got {qs.shape}")
    return float(np.mean(crps_weights(taus, weighting) * qs))


def newey_west_var(d: np.ndarray, lag: int | None = None) -> float:
    """Bartlett-kernel long-run variance of ``d`` with lag ``floor(P^(1/3))``."""
    d = np.asarray(d, dtype=float)
    P = d.size
    lag = int(np.floor(P ** (1.0 / 3.0))) if lag is None else lag
    e = d - d.mean()
    v = e @ e / P
    for j in range(1, lag + 1):
        v += 2.0 * (1.0 - j / (lag + 1.0)) * (e[j:] @ e[:-j]) / P
    return float(v)


def dm_test(loss_diff, alternative: str = "less", lag: int | None = None) -> tuple[float, float]:
    """Diebold-Mariano statistic ``mean(d) / sqrt(lrv / P)``.

    ``loss_diff`` is the model's loss minus the benchmark's; with the
    default ``alternative='less'`` small p-values favour the model.
    """
    d = np.asarray(loss_diff, dtype=float)
    P = d.size
    if P < 10:
        raise ValidationError(f"DM test needs at least 10 loss differentials, got {P}")
    mean = d.mean()
    var = newey_west_var(d, lag)
    if var <= 0:
        if mean == 0:
            return 0.0, 0.5
        raise ZeroVariance("loss differential has zero long-run variance")
    stat = mean / np.sqrt(var / P)
    if alternative == "less":
        p = stats.norm.cdf(stat)
    elif alternative == "greater":
        p = stats.norm.sf(stat)
    elif alternative == "two-sided":
        p = 2.0 * stats.norm.sf(abs(stat))
    else:
        raise ValueError(f"unknown alternative {alternative!r}")
    return float(stat), float(p)


def load_fluctuation_table(path=None) -> pd.DataFrame:
    """Two-sided critical values keyed by ``mu = m / P``."""
    if path is None:
        with resources.files("inflrisk").joinpath("data/fluctuation_cv.csv").open() as fh:
            return pd.read_csv(fh)
    return pd.read_csv(path)


def fluctuation_critical_value(mu: float, alpha: float = 0.05, table: pd.DataFrame | None = None) -> tuple[float, float]:
    """Critical value for the nearest tabulated ``mu``; returns (mu used, value)."""
    table = load_fluctuation_table() if table is None else table
    col = f"alpha_{alpha:.2f}"
    if col not in table.columns:
        raise ValidationError(f"no critical values for alpha={alpha}")
    row = int(np.argmin(np.abs(table["mu"].to_numpy() - mu)))
    return float(table["mu"].iloc[row]), float(table[col].iloc[row])


@dataclass(frozen=True)
class FluctuationResult:
    path: np.ndarray  # statistic for windows ending at t = m-1, ..., P-1
    end: np.ndarray  # index of the last observation in each window
    m: int
    mu: float
    cv: float
    sigma: float

    @property
    def rejects(self) -> bool:
        return bool(np.any(np.abs(self.path) > self.cv))


def fluctuation_test(loss_diff, m: int | None = None, alpha: float = 0.05,
                     table: pd.DataFrame | None = None, lag: int | None = None) -> FluctuationResult:
    """Rolling standardized sums ``sum(d over window) / (sigma * sqrt(m))``.

    ``sigma`` is the full-sample Newey-West standard deviation of ``d``; the
    boundary is +/- the critical value for ``mu = m / P``.
    """
    d = np.asarray(loss_diff, dtype=float)
    P = d.size
    m = int(np.floor(0.3 * P)) if m is None else int(m)
    if m >= P:
        raise WindowTooLarge(f"window m={m} must be smaller than P={P}")
    if m < 1:
        raise ValidationError("window must contain at least one observation")
    mu, cv = fluctuation_critical_value(m / P, alpha, table)
    sigma = np.sqrt(newey_west_var(d, lag))
    c = np.concatenate([[0.0], np.cumsum(d)])
    sums = c[m:] - c[:-m]
    if sigma > 0:
        path = sums / (sigma * np.sqrt(m))
    elif np.all(d == 0):
        path = np.zeros_like(sums)
    else:
        raise ZeroVariance("loss differential has zero long-run variance")
    return FluctuationResult(path, np.arange(m - 1, P), m, mu, cv, float(sigma))


def simulate_fluctuation_cv(mus=np.arange(1, 10) / 10, alphas=(0.05, 0.10), n: int = 2000,
                            reps: int = 20000, seed: int = 0) -> pd.DataFrame:
    """Monte Carlo quantiles of ``sup |B(t) - B(t - mu)| / sqrt(mu)``."""
    rng = np.random.default_rng(seed)
    mus = np.round(np.asarray(mus, dtype=float), 10)
    draws = {m: [] for m in mus}
    for s in range(0, reps, 500):
        b = min(500, reps - s)
        W = np.concatenate([np.zeros((b, 1)), np.cumsum(rng.standard_normal((b, n)), axis=1) / np.sqrt(n)], axis=1)
        for m in mus:
            k = int(round(m * n))
            draws[m].append(np.abs(W[:, k:] - W[:, :-k]).max(axis=1) / np.sqrt(m))
    rows = {"mu": mus}
    for a in alphas:
        rows[f"alpha_{a:.2f}"] = [float(np.quantile(np.concatenate(draws[m]), 1 - a)) for m in mus]
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# model comparison


def loss_paths(fc: ForecastSet) -> dict[str, np.ndarray]:
    """Per-vintage losses, shape (V, N): QS at each tau and the CRPS variants."""
    taus = np.asarray(fc.taus)
    L = quantile_loss(fc.q, fc.y[:, :, None], taus[None, None, :])
    out = {f"QS_{t:g}": L[:, :, k] for k, t in enumerate(fc.taus)}
    if len(fc.taus) == 5:
        for w in "ELR":
            out[f"CRPS_{w}"] = np.mean(crps_weights(taus, w) * L, axis=2)
    return out


@dataclass(eq=False)
class EvalReport:
    scores: pd.DataFrame
    summary: pd.DataFrame
    fluctuation: pd.DataFrame
    forecasts: dict[str, ForecastSet]
    vintages: list[VintageFactors]


def _dm_safe(d):
    ok = np.isfinite(d)
    if ok.sum() < 10:
        return np.nan, np.nan, "fewer than 10 valid vintages"
    try:
        s, p = dm_test(d[ok])
        return s, p, ""
    except ZeroVariance as exc:
        return np.nan, np.nan, str(exc)


def compare(forecasts: dict[str, ForecastSet], meta, fluct_m: int | None = None,
            fluct_alpha: float = 0.05, level: float = 0.10) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Scores, DM tests and fluctuation paths of every model against AR-QR."""
    if BENCHMARK not in forecasts:
        raise ValidationError("the AR_QR benchmark must be among the models")
    bench = loss_paths(forecasts[BENCHMARK])
    codes = forecasts[BENCHMARK].codes
    dates = forecasts[BENCHMARK].dates
    metrics = list(bench)
    rows, frows = [], []
    for m, fc in forecasts.items():
        losses = loss_paths(fc)
        for i, code in enumerate(codes):
            rec = {"code": code, "model": m}
            for met in metrics:
                a, b = losses[met][:, i], bench[met][:, i]
                ok = np.isfinite(a) & np.isfinite(b)
                va = float(a[ok].mean()) if ok.any() else np.nan
                vb = float(b[ok].mean()) if ok.any() else np.nan
                d = np.where(ok, a - b, np.nan)
                if m == BENCHMARK:
                    s, p, why = 0.0, 0.5, ""
                else:
                    s, p, why = _dm_safe(d)
                rec[met] = va
                rec[f"ratio_{met}"] = va / vb if vb > 0 else np.nan
                rec[f"dm_stat_{met}"] = s
                rec[f"dm_p_{met}"] = p
                rec[f"n_{met}"] = int(ok.sum())
                if why:
                    rec.setdefault("reason", why)
                if m != BENCHMARK and ok.sum() >= 10:
                    try:
                        fr = fluctuation_test(d[ok], fluct_m, fluct_alpha)
                    except (ZeroVariance, WindowTooLarge):
                        continue
                    for t_end, val in zip(dates[ok][fr.end], fr.path):
                        frows.append((code, m, met, str(t_end), float(val), -fr.cv, fr.cv))
            rows.append(rec)
    wide = pd.DataFrame(rows)
    if "reason" not in wide:
        wide["reason"] = ""
    wide["reason"] = wide["reason"].fillna("")

    # long per-tau layout with the CRPS columns repeated
    long_rows = []
    crps_cols = [c for c in metrics if c.startswith("CRPS")]
    for rec in wide.to_dict("records"):
        for t in forecasts[BENCHMARK].taus:
            met = f"QS_{t:g}"
            row = {"code": rec["code"], "model": rec["model"], "tau": t, "QS": rec[met]}
            for c in crps_cols:
                row[c] = rec[c]
            row["ratio_QS"] = rec[f"ratio_{met}"]
            for c in crps_cols:
                row[f"ratio_{c}"] = rec[f"ratio_{c}"]
            row["dm_stat"] = rec[f"dm_stat_{met}"]
            row["dm_p"] = rec[f"dm_p_{met}"]
            for c in crps_cols:
                row[f"dm_stat_{c}"] = rec[f"dm_stat_{c}"]
                row[f"dm_p_{c}"] = rec[f"dm_p_{c}"]
            row["n_vintages"] = rec[f"n_{met}"]
            row["reason"] = rec["reason"]
            long_rows.append(row)
    scores = pd.DataFrame(long_rows)

    # share of countries with a significant DM test by group
    region = {x.code: x.region for x in meta}
    income = {x.code: x.income for x in meta}
    srows = []
    for m in forecasts:
        if m == BENCHMARK:
            continue
        sub = wide[wide["model"] == m]
        for met in metrics:
            sig = sub[f"dm_p_{met}"] < level
            below = sub[f"ratio_{met}"] < 1
            groups = [("all", "all", np.ones(len(sub), bool))]
            groups += [("region", r, sub["code"].map(region).eq(r).to_numpy()) for r in REGIONS]
            groups += [("income", g, sub["code"].map(income).eq(g).to_numpy()) for g in INCOMES]
            for gt, g, mask in groups:
                n = int(mask.sum())
                srows.append({
                    "model": m, "metric": met, "group_type": gt, "group": g, "n": n,
                    "pct_significant": 100.0 * sig[mask].mean() if n else np.nan,
                    "pct_ratio_below_1": 100.0 * below[mask].mean() if n else np.nan,
                })
    summary = pd.DataFrame(srows)
    fluct = pd.DataFrame(frows, columns=["code", "model", "metric", "date", "statistic", "cv_lo", "cv_hi"])
    return scores, summary, fluct


def model_grid(
    panel: InflationPanel,
    structure: BlockStructure,
    split: SplitConfig,
    models: Iterable[str] = ("M1",),
    taus: Sequence[float] = DEFAULT_TAUS,
    mldfm_config: MLDFMConfig = MLDFMConfig(),
    mb_level: float = 0.10,
    fluct_m: int | None = None,
    fluct_alpha: float = 0.05,
    level: float = 0.10,
    jobs: int = 1,
) -> EvalReport:
    """Run the rolling evaluation for ``models`` plus the AR-QR benchmark."""
    models = tuple(dict.fromkeys(tuple(models) + (BENCHMARK,)))
    fcs, vf = rolling_forecasts(panel, structure, models, split, taus, mldfm_config, mb_level, jobs)
    scores, summary, fluct = compare(fcs, panel.meta, fluct_m, fluct_alpha, level)
    return EvalReport(scores, summary, fluct, fcs, vf)
