"""Stage runners behind the command-line tool.

Each stage reads its inputs from files written by earlier stages under the
output directory, so stages can be rerun independently.  Every stage
directory carries a ``manifest.json`` with the tool version, a hash of the
configuration and SHA-256 checksums of inputs and outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

import numpy as np
import pandas as pd

from . import __version__
from .density import (
    DEFAULT_TAUS,
    SkewTParams,
    fit_skewt_batch,
    rearrange,
    risk,
    skewt_density,
)
from .errors import InflRiskError, NumericalError, SingularRestriction, ValidationError
from .evaluate import BENCHMARK, COEF_NAMES, MODELS, SplitConfig, model_grid
from .faqr import (
    QuantileSpec,
    ar_qr,
    fa_qr,
    forecast_row,
    pvalues,
    wald_factor_test,
)
from .ingest import (
    CountryMeta,
    InflationPanel,
    cpi_to_inflation,
    load_meta,
    load_panel,
    read_inflation,
    write_inflation,
    write_meta,
)
from .mldfm import (
    FACTOR_NAMES,
    MLDFMConfig,
    build_block_structure,
    estimate_mldfm,
    factor_bands,
    scree,
)
from .preprocess import preprocess_panel

log = logging.getLogger(__name__)

STAGES = ("ingest", "preprocess", "factors", "fit", "density", "risk", "evaluate", "report")
QUANTILE_SOURCES = ("fitted", "rolling")
# settings that cannot change any output and so stay out of the config hash
_UNHASHED = ("out", "jobs", "stages")


# ---------------------------------------------------------------------------
# configuration


def _tuple_of(value, kind) -> tuple:
    if value is None:
        return ()
    if isinstance(value, str):
        value = [v for v in (p.strip() for p in value.split(",")) if v]
    return tuple(kind(v) for v in value)


@dataclass(frozen=True)
class RunConfig:
    prices: str | None = None
    meta: str | None = None
    out: str = "inflrisk_out"
    taus: tuple[float, ...] = DEFAULT_TAUS
    split: str = "155:132"
    models: tuple[str, ...] = ("M1", "M2", "M3", "M4", "M5", "MB")
    iar_threshold: float = 3.0
    dar_threshold: float = 0.0
    tol: float = 1e-6
    max_iter: int = 1000
    seed: int = 0
    jobs: int = 1
    exclude: tuple[str, ...] = ()
    restarts: int = 5
    outlier_k: float = 10.0
    seasonal_level: float | None = 0.01
    band_level: float = 0.95
    scree_threshold: float = 0.05
    mb_level: float = 0.10
    dm_level: float = 0.10
    fluct_m: int | None = None
    fluct_alpha: float = 0.05
    quantile_source: str = "fitted"
    risk_model: str = "M1"
    density_dates: tuple[str, ...] = ()
    density_points: int = 201
    stages: tuple[str, ...] = STAGES

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "RunConfig":
        """Build from a flat mapping of setting names (dashes or underscores)."""
        known = {f.name for f in dataclasses.fields(cls)}
        kw = {}
        for key, val in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ValidationError(f"unknown setting {key!r}")
            kw[name] = val
        for name in ("taus",):
            if name in kw:
                kw[name] = _tuple_of(kw[name], float)
        for name in ("models", "exclude", "density_dates", "stages"):
            if name in kw:
                kw[name] = _tuple_of(kw[name], str)
        if "seasonal_level" in kw and str(kw["seasonal_level"]).lower() in ("none", "off", "null"):
            kw["seasonal_level"] = None
        if "fluct_m" in kw and str(kw["fluct_m"]).lower() in ("none", "auto", "null"):
            kw["fluct_m"] = None
        try:
            for f in dataclasses.fields(cls):
                if f.name in kw and kw[f.name] is not None:
                    if f.type in ("float", "float | None"):
                        kw[f.name] = float(kw[f.name])
                    elif f.type in ("int", "int | None"):
                        kw[f.name] = int(kw[f.name])
                    elif f.type in ("str", "str | None"):
                        kw[f.name] = str(kw[f.name])
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad setting value: {exc}") from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        t = np.asarray(self.taus, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ValidationError(f"taus must be strictly increasing in (0, 1), got {self.taus}")
        SplitConfig.parse(self.split)
        bad = [m for m in self.models if m not in MODELS]
        if bad:
            raise ValidationError(f"unknown models {bad}; choose from {list(MODELS)}")
        if self.risk_model not in MODELS:
            raise ValidationError(f"unknown risk model {self.risk_model!r}")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValidationError(f"unknown stages {bad}; choose from {list(STAGES)}")
        if self.quantile_source not in QUANTILE_SOURCES:
            raise ValidationError(f"quantile source must be one of {QUANTILE_SOURCES}")
        if self.jobs < 1 or self.restarts < 1 or self.max_iter < 1:
            raise ValidationError("jobs, restarts and max-iter must be positive")
        if not (self.tol > 0 and self.outlier_k > 0):
            raise ValidationError("tol and outlier-k must be positive")
        for name in ("band_level", "scree_threshold", "mb_level", "dm_level"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name.replace('_', '-')} must lie in (0, 1)")
        if self.seasonal_level is not None and not 0.0 < self.seasonal_level < 1.0:
            raise ValidationError("seasonal-level must lie in (0, 1) or be 'none'")
        if self.fluct_alpha not in (0.05, 0.10):
            raise ValidationError("fluct-alpha must be 0.05 or 0.10")
        if self.fluct_m is not None and self.fluct_m < 2:
            raise ValidationError("fluct-m must be at least 2")
        if self.density_points < 2:
            raise ValidationError("density-points must be at least 2")
        if not all(math.isfinite(v) for v in (self.iar_threshold, self.dar_threshold)):
            raise ValidationError("risk thresholds must be finite")

    def hashed(self) -> dict:
        d = dataclasses.asdict(self)
        for k in _UNHASHED:
            d.pop(k, None)
        # input files enter through their checksums, not their paths
        d.pop("prices", None)
        d.pop("meta", None)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.hashed(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# file helpers


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_table(df: pd.DataFrame, path: Path, precision: int = 10) -> None:
    """CSV with fixed float formatting and ``NA`` for missing cells."""
    df.to_csv(path, index=False, float_format=f"%.{precision}g", na_rep="NA", lineterminator="\n")


def read_table(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise ValidationError(f"missing input {path}; run the stage that produces it first")
    return pd.read_csv(path, na_values=["NA"], keep_default_na=False)


def _clean_json(obj):
    if isinstance(obj, dict):
        return {k: _clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_json(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(_clean_json(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _reason(*parts: str) -> str:
    return "; ".join(p for p in parts if p)


def _map(fn: Callable, tasks: list, jobs: int) -> list:
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    return [fn(t) for t in tasks]


@dataclass(frozen=True)
class Layout:
    root: Path

    def stage(self, name: str) -> Path:
        return self.root / name

    def ensure(self, name: str) -> Path:
        d = self.stage(name)
        d.mkdir(parents=True, exist_ok=True)
        return d


def write_manifest(cfg: RunConfig, layout: Layout, stage: str, inputs: Iterable[Path]) -> None:
    d = layout.stage(stage)
    outputs = sorted(p for p in d.rglob("*") if p.is_file() and p.name != "manifest.json")

    def label(p: Path) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(layout.root.resolve()).as_posix()
        except ValueError:
            return p.name

    manifest = {
        "tool": "inflrisk",
        "version": __version__,
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "config": cfg.hashed(),
        "inputs": {label(p): sha256(p) for p in sorted(set(inputs), key=str)},
        "outputs": {p.relative_to(d).as_posix(): sha256(p) for p in outputs},
    }
    write_json(manifest, d / "manifest.json")


def _reusable_densities(cfg: RunConfig, layout: Layout) -> bool:
    """Whether density/skewt.csv was built from the current quantiles and settings."""
    p = layout.stage("density") / "manifest.json"
    if not p.exists():
        return False
    man = json.loads(p.read_text())
    keys = ("taus", "quantile_source", "risk_model")
    if any(man["config"].get(k) != _clean_json(getattr(cfg, k)) for k in keys):
        return False
    for label, digest in man["inputs"].items():
        src = layout.root / label
        if not src.exists() or sha256(src) != digest:
            return False
    return "skewt.csv" in man["outputs"] and sha256(layout.stage("density") / "skewt.csv") == man["outputs"]["skewt.csv"]


def _with_context(exc: BaseException, **ctx) -> BaseException:
    merged = dict(getattr(exc, "context", None) or {})
    merged.update({k: v for k, v in ctx.items() if v is not None})
    exc.context = merged
    return exc


def _tau_label(t: float) -> str:
    return f"{t:g}"


def _short(name: str) -> str:
    # "F_Af" -> "Af"
    return name[2:]


# ---------------------------------------------------------------------------
# shared loaders


def _meta(layout: Layout) -> tuple[CountryMeta, ...]:
    p = layout.stage("ingest") / "meta.csv"
    if not p.exists():
        raise ValidationError(f"missing input {p}; run the ingest stage first")
    return load_meta(p)


def _cleaned(layout: Layout) -> InflationPanel:
    p = layout.stage("preprocess") / "cleaned.csv"
    if not p.exists():
        raise ValidationError(f"missing input {p}; run the preprocess stage first")
    return read_inflation(p, _meta(layout), "cleaned")


def _factors(layout: Layout, panel: InflationPanel) -> np.ndarray:
    """Unit-variance factors aligned with the panel dates."""
    df = read_table(layout.stage("factors") / "factors.csv")
    if list(df["date"]) != list(panel.dates.strftime("%Y-%m")):
        raise ValidationError("factor dates do not match the cleaned panel; rerun the factors stage")
    F = df[list(FACTOR_NAMES)].to_numpy(dtype=float)
    return F * np.sqrt(F.shape[0])


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: RunConfig, layout: Layout) -> list[Path]:
    if not cfg.prices or not cfg.meta:
        raise ValidationError("the ingest stage needs --prices and --meta")
    raw = load_panel(cfg.prices, cfg.meta, cfg.exclude)
    panel = cpi_to_inflation(raw)
    d = layout.ensure("ingest")
    write_meta(panel.meta, d / "meta.csv")
    write_inflation(panel, d / "inflation.csv")
    log.info("ingest: %d countries, %d months", panel.N, panel.T)
    return [Path(cfg.prices), Path(cfg.meta)]


def stage_preprocess(cfg: RunConfig, layout: Layout) -> list[Path]:
    src = layout.stage("ingest") / "inflation.csv"
    if not src.exists():
        raise ValidationError(f"missing input {src}; run the ingest stage first")
    meta = _meta(layout)
    panel = read_inflation(src, meta, "raw")
    deseas, cleaned, adjs, reports = preprocess_panel(
        panel, cfg.restarts, cfg.seed, cfg.seasonal_level, cfg.outlier_k, cfg.jobs
    )
    d = layout.ensure("preprocess")
    write_inflation(deseas, d / "deseasonalized.csv")
    write_inflation(cleaned, d / "cleaned.csv")
    rows = [
        (code, str(panel.dates[t]), orig, repl)
        for code, rep in zip(panel.codes, reports)
        for t, orig, repl in rep.entries
    ]
    write_table(pd.DataFrame(rows, columns=["code", "date", "original", "replacement"]),
                d / "outliers.csv", precision=17)
    hp = {
        code: {
            "sigma2_level": a.hyperparams["level"],
            "sigma2_seasonal": a.hyperparams["seasonal"],
            "sigma2_irregular": a.hyperparams["irregular"],
            "loglik": a.loglik,
            "converged": a.converged,
            "seasonal_pvalue": a.seasonal_pvalue,
            "seasonal_applied": a.applied,
            "outlier_median": r.median,
            "outlier_iqr": r.iqr,
        }
        for code, a, r in zip(panel.codes, adjs, reports)
    }
    write_json(hp, d / "hyperparams.json")
    log.info("preprocess: %d outliers replaced", len(rows))
    return [src, layout.stage("ingest") / "meta.csv"]


def stage_factors(cfg: RunConfig, layout: Layout) -> list[Path]:
    panel = _cleaned(layout)
    structure = build_block_structure(panel.meta)
    fs = estimate_mldfm(panel, structure, MLDFMConfig(tol=cfg.tol, max_iter=cfg.max_iter))
    d = layout.ensure("factors")
    dates = panel.dates.strftime("%Y-%m")

    fdf = pd.DataFrame(fs.factors, columns=fs.names)
    fdf.insert(0, "date", dates)
    write_table(fdf, d / "factors.csv", precision=17)
    ldf = pd.DataFrame(fs.loadings, columns=[f"lambda_{_short(n)}" for n in fs.names])
    ldf.insert(0, "code", panel.codes)
    write_table(ldf, d / "loadings.csv", precision=17)

    # bands on the unit-variance scale used by the regressions
    scale = np.sqrt(fs.T)
    bands = factor_bands(fs, cfg.band_level)
    bdf = pd.DataFrame({"date": dates})
    for k, name in enumerate(fs.names):
        f = fs.factors[:, k] * scale
        bdf[name] = f
        bdf[f"{name}_lo"] = f - bands[name] * scale
        bdf[f"{name}_hi"] = f + bands[name] * scale
    write_table(bdf, d / "bands.csv")

    srows = []
    groups = [("all", None)] + [(n, np.flatnonzero(structure.mask[:, k])) for k, n in enumerate(fs.names) if k > 0]
    for label, subset in groups:
        rep = scree(panel, subset, cfg.scree_threshold)
        for j, share in enumerate(rep.shares[:10]):
            srows.append((label, j + 1, share, share > rep.threshold))
    write_table(pd.DataFrame(srows, columns=["group", "component", "share", "above_threshold"]),
                d / "scree.csv")

    write_json({
        "iterations": fs.n_iter,
        "converged": fs.converged,
        "objective_path": list(fs.objective_path),
        "tol": cfg.tol,
        "max_iter": cfg.max_iter,
        "factor_scale": "factors.csv has unit-norm columns; bands.csv is on the unit-variance scale",
        "band_level": cfg.band_level,
        "band_method": {
            n: ("plug-in" if lvl == "global" else "heuristic") for n, lvl in zip(fs.names, fs.levels)
        },
    }, d / "estimation.json")
    if not fs.converged:
        log.warning("factors: estimation stopped after %d sweeps without converging", fs.n_iter)
    return [layout.stage("preprocess") / "cleaned.csv", layout.stage("ingest") / "meta.csv"]


_COEF_LABEL = {"const": "mu", "lag": "phi", **{n: _short(n) for n in FACTOR_NAMES}}
_COEF_LABEL = {k: ("beta_" + v if k.startswith("F_") else v) for k, v in _COEF_LABEL.items()}


def _coef_columns() -> list[str]:
    est = [_COEF_LABEL[n] for n in COEF_NAMES]
    se = ["se_" + c.replace("beta_", "") for c in est]
    pv = ["pval_" + c.replace("beta_", "") for c in est]
    return est + se + pv


def _fit_country(args):
    values, F, i, code, allowed, taus = args
    T = values.shape[0]
    y = values[:, i]
    rows, qs = [], np.full((T, len(taus)), np.nan)
    excluded = [_short(n) for n in FACTOR_NAMES if n not in allowed]
    for k, tau in enumerate(taus):
        rec = {c: np.nan for c in _coef_columns()}
        rec.update(code=code, tau=tau, wald_F=np.nan, wald_p=np.nan, r1=np.nan, aic=np.nan, aic_ar=np.nan)
        notes = ["excluded by block structure: " + ",".join(excluded)] if excluded else []
        spec = QuantileSpec(tau, i, ("lag",) + tuple(allowed))
        try:
            fit = fa_qr(values, F, spec)
        except (InflRiskError, np.linalg.LinAlgError) as exc:
            notes.append(f"fit failed: {type(exc).__name__}: {exc}")
            fit = None
        if fit is not None:
            pv = pvalues(fit)
            for nm, th, se, p in zip(fit.names, fit.theta, fit.se, pv):
                lab = _COEF_LABEL[nm]
                rec[lab] = th
                rec["se_" + lab.replace("beta_", "")] = se
                rec["pval_" + lab.replace("beta_", "")] = p
            try:
                rec["wald_F"], rec["wald_p"] = wald_factor_test(fit)
            except SingularRestriction as exc:
                notes.append(f"wald test: {exc}")
            rec["r1"], rec["aic"] = fit.r1, fit.aic
            if not math.isfinite(fit.r1):
                notes.append("r1 undefined for a constant response")
            rows_all = np.array([forecast_row(y[t], F[t], FACTOR_NAMES, spec.regressors) for t in range(T)])
            qs[:, k] = rows_all @ fit.theta
        try:
            rec["aic_ar"] = ar_qr(values, i, tau, with_cov=False).aic
        except (InflRiskError, np.linalg.LinAlgError) as exc:
            notes.append(f"AR benchmark failed: {type(exc).__name__}: {exc}")
        rec["reason"] = _reason(*notes)
        rows.append(rec)
    return rows, qs


def stage_fit(cfg: RunConfig, layout: Layout) -> list[Path]:
    panel = _cleaned(layout)
    structure = build_block_structure(panel.meta)
    F = _factors(layout, panel)
    taus = tuple(cfg.taus)
    tasks = [(panel.values, F, i, c, structure.allowed(i), taus) for i, c in enumerate(panel.codes)]
    results = _map(_fit_country, tasks, cfg.jobs)

    cols = ["code", "tau"] + _coef_columns() + ["wald_F", "wald_p", "r1", "aic", "aic_ar", "reason"]
    coef = pd.DataFrame([r for rows, _ in results for r in rows], columns=cols)
    d = layout.ensure("fit")
    write_table(coef, d / "coefficients.csv")

    # one-step-ahead fitted quantiles, labelled by the month they refer to
    target = (panel.dates + 1).strftime("%Y-%m")
    qrows = []
    for code, (_, qs) in zip(panel.codes, results):
        df = pd.DataFrame(qs, columns=[f"q_{_tau_label(t)}" for t in taus])
        df.insert(0, "date", target)
        df.insert(0, "code", code)
        qrows.append(df)
    qdf = pd.concat(qrows, ignore_index=True)
    qdf["reason"] = np.where(qdf.iloc[:, 2:].isna().any(axis=1), "fit failed", "")
    write_table(qdf, d / "quantiles.csv", precision=17)
    nfail = int(coef["mu"].isna().sum())
    if nfail:
        log.warning("fit: %d (country, tau) regressions failed; see the reason column", nfail)
    return [layout.stage("preprocess") / "cleaned.csv", layout.stage("factors") / "factors.csv"]


def _quantile_source(cfg: RunConfig, layout: Layout) -> tuple[pd.DataFrame, Path]:
    """Long (code, date, q_* ...) table feeding the density fits."""
    qcols = [f"q_{_tau_label(t)}" for t in cfg.taus]
    if cfg.quantile_source == "fitted":
        p = layout.stage("fit") / "quantiles.csv"
        df = read_table(p)
        missing = [c for c in qcols if c not in df.columns]
        if missing:
            raise ValidationError(f"{p} lacks columns {missing}; rerun the fit stage with these taus")
        return df[["code", "date"] + qcols], p
    p = layout.stage("evaluate") / "forecasts.csv"
    df = read_table(p)
    df = df[df["model"] == cfg.risk_model]
    if df.empty:
        raise ValidationError(f"no rolling forecasts for model {cfg.risk_model} in {p}")
    wide = df.pivot_table(index=["code", "date"], columns="tau", values="forecast", aggfunc="first", dropna=False)
    wide = wide.reindex(columns=list(cfg.taus))
    wide.columns = qcols
    wide = wide.reset_index()
    order = {c: j for j, c in enumerate(dict.fromkeys(df["code"]))}
    wide = wide.sort_values(["code", "date"], key=lambda s: s.map(order) if s.name == "code" else s)
    return wide.reset_index(drop=True), p


def fit_densities(q: np.ndarray, taus, chunk: int = 4096) -> pd.DataFrame:
    """Skew-t fits to rows of ``q``; rows that cannot be fitted get NA and a reason."""
    n = q.shape[0]
    out = pd.DataFrame({
        "xi": np.nan, "omega": np.nan, "alpha": np.nan, "nu": np.nan,
        "crossing_flag": 0, "heavy_tail": 0, "objective": np.nan, "reason": "",
    }, index=range(n))
    good, qs = [], []
    for j in range(n):
        row = q[j]
        if not np.all(np.isfinite(row)):
            out.at[j, "reason"] = "quantile forecast unavailable"
            continue
        r, crossed = rearrange(row)
        out.at[j, "crossing_flag"] = int(crossed)
        if not r[-1] > r[0]:
            out.at[j, "reason"] = "quantiles have zero spread"
            continue
        good.append(j)
        qs.append(r)
    for s in range(0, len(good), chunk):
        idx = good[s:s + chunk]
        fits = fit_skewt_batch(np.array(qs[s:s + chunk]), taus)
        for j, f in zip(idx, fits):
            p = f.params
            out.loc[j, ["xi", "omega", "alpha", "nu", "objective"]] = [p.xi, p.omega, p.alpha, p.nu, f.objective]
            out.at[j, "heavy_tail"] = int(f.heavy_tail)
    return out


def _density_table(cfg: RunConfig, layout: Layout) -> tuple[pd.DataFrame, list[Path]]:
    src, path = _quantile_source(cfg, layout)
    qcols = [c for c in src.columns if c.startswith("q_")]
    fits = fit_densities(src[qcols].to_numpy(dtype=float), cfg.taus)
    return pd.concat([src[["code", "date"]].reset_index(drop=True), fits], axis=1), [path]


def stage_density(cfg: RunConfig, layout: Layout) -> list[Path]:
    table, inputs = _density_table(cfg, layout)
    d = layout.ensure("density")
    write_table(table, d / "skewt.csv", precision=12)

    dates = list(cfg.density_dates) or [table["date"].iloc[-1]]
    unknown = sorted(set(dates) - set(table["date"]))
    if unknown:
        raise ValidationError(f"density dates {unknown} are not in the fitted sample")
    src, _ = _quantile_source(cfg, layout)
    qcols = [c for c in src.columns if c.startswith("q_")]
    grid_rows = []
    for j in np.flatnonzero(table["date"].isin(dates).to_numpy()):
        rec = table.iloc[j]
        if rec["reason"]:
            continue
        q = np.sort(src[qcols].iloc[j].to_numpy(dtype=float))
        span = q[-1] - q[0]
        x = np.linspace(q[0] - 1.5 * span, q[-1] + 1.5 * span, cfg.density_points)
        p = SkewTParams(rec["xi"], rec["omega"], rec["alpha"], rec["nu"])
        for xv, fv in zip(x, skewt_density(p, x)):
            grid_rows.append((rec["code"], rec["date"], xv, fv))
    write_table(pd.DataFrame(grid_rows, columns=["code", "date", "x", "density"]), d / "grid.csv")
    n_na = int((table["reason"] != "").sum())
    if n_na:
        log.warning("density: %d rows without a fitted density; see the reason column", n_na)
    return inputs


def stage_risk(cfg: RunConfig, layout: Layout) -> list[Path]:
    cached = layout.stage("density") / "skewt.csv"
    if cached.exists() and _reusable_densities(cfg, layout):
        table, inputs = read_table(cached), [cached]
        table["reason"] = table["reason"].fillna("")
    else:
        table, inputs = _density_table(cfg, layout)
    iar_col = f"iar{cfg.iar_threshold:g}"
    dar_col = f"dar{cfg.dar_threshold:g}"
    iar = np.full(len(table), np.nan)
    dar = np.full(len(table), np.nan)
    for j, rec in enumerate(table.itertuples(index=False)):
        if rec.reason:
            continue
        r = risk(SkewTParams(rec.xi, rec.omega, rec.alpha, rec.nu), cfg.iar_threshold, cfg.dar_threshold)
        iar[j], dar[j] = r.iar, r.dar
    out = table[["code", "date", "xi", "omega", "alpha", "nu", "crossing_flag"]].copy()
    out[iar_col] = iar
    out[dar_col] = dar
    out["reason"] = table["reason"]
    d = layout.ensure("risk")
    write_table(out, d / "risk.csv", precision=12)
    return inputs


def stage_evaluate(cfg: RunConfig, layout: Layout) -> list[Path]:
    panel = _cleaned(layout)
    structure = build_block_structure(panel.meta)
    split = SplitConfig.parse(cfg.split)
    rep = model_grid(
        panel, structure, split, cfg.models, cfg.taus,
        MLDFMConfig(tol=cfg.tol, max_iter=cfg.max_iter), cfg.mb_level,
        cfg.fluct_m, cfg.fluct_alpha, cfg.dm_level, cfg.jobs,
    )
    d = layout.ensure("evaluate")
    scores = rep.scores.copy()
    scores["reason"] = scores["reason"].fillna("")
    write_table(scores, d / "scores.csv")
    write_table(rep.summary, d / "summary.csv")
    write_table(rep.fluctuation, d / "fluctuation.csv")

    frows, fails = [], []
    for m, fc in rep.forecasts.items():
        why = {(str(dt), c, t): r for dt, c, t, r in fc.failures}
        for v, dt in enumerate(fc.dates):
            for i, code in enumerate(fc.codes):
                for k, tau in enumerate(fc.taus):
                    val = fc.q[v, i, k]
                    reason = "" if np.isfinite(val) else why.get((str(dt), code, tau), "fit failed")
                    frows.append((m, code, tau, str(dt), val, fc.y[v, i], reason))
        fails += [(m, str(dt), c, t, r) for dt, c, t, r in fc.failures]
    write_table(pd.DataFrame(frows, columns=["model", "code", "tau", "date", "forecast", "realized", "reason"]),
                d / "forecasts.csv", precision=17)
    write_table(pd.DataFrame(fails, columns=["model", "date", "code", "tau", "reason"]), d / "failures.csv")

    vd = d / "vintages"
    vd.mkdir(exist_ok=True)
    idx = []
    for v, vf in enumerate(rep.vintages):
        tag = str(vf.date)
        idx.append((tag, str(vf.dates[0]), str(vf.dates[-1]), str(vf.date + 1), vf.converged, vf.n_iter, vf.error))
        if vf.factors is not None:
            fdf = pd.DataFrame(vf.factors, columns=FACTOR_NAMES)
            fdf.insert(0, "date", vf.dates.strftime("%Y-%m"))
            write_table(fdf, vd / f"factors_{tag}.csv")
        crow = []
        for m, fc in rep.forecasts.items():
            for i, code in enumerate(fc.codes):
                for k, tau in enumerate(fc.taus):
                    th = fc.theta[v, i, k]
                    if np.all(np.isnan(th)):
                        reason = "fit failed"
                    elif np.isnan(th).any():
                        reason = "NA marks regressors outside the model"
                    else:
                        reason = ""
                    crow.append((m, code, tau, *th, reason))
        write_table(pd.DataFrame(crow, columns=["model", "code", "tau", *COEF_NAMES, "reason"]),
                    vd / f"coefficients_{tag}.csv")
    write_table(pd.DataFrame(idx, columns=["vintage", "first", "last", "target", "converged", "n_iter", "error"]),
                vd / "index.csv")
    return [layout.stage("preprocess") / "cleaned.csv"]


def stage_report(cfg: RunConfig, layout: Layout) -> list[Path]:
    d = layout.ensure("report")
    meta = {m.code: m for m in _meta(layout)}
    inputs, lines = [], ["# inflrisk report", ""]

    coef_p = layout.stage("fit") / "coefficients.csv"
    if coef_p.exists():
        inputs.append(coef_p)
        coef = read_table(coef_p)
        coef["reason"] = coef["reason"].fillna("")
        coef.insert(1, "region", coef["code"].map(lambda c: meta[c].region))
        coef.insert(2, "income", coef["code"].map(lambda c: meta[c].income))
        est_cols = [c for c in coef.columns if not c.startswith("se_")]
        write_table(coef[est_cols], d / "estimates.csv")
        jt = coef[["code", "region", "income", "tau", "wald_F", "wald_p", "reason"]].copy()
        jt["significant_10pct"] = (jt["wald_p"] < 0.10).astype(int)
        jt.loc[jt["wald_p"].isna(), "significant_10pct"] = pd.NA
        write_table(jt, d / "joint_tests.csv")
        lines += ["## Joint significance of the factors (Wald, 10% level)", "",
                  "| tau | countries | significant | share |", "|---|---|---|---|"]
        for tau, g in jt.groupby("tau"):
            ok = g["wald_p"].notna()
            sig = int((g.loc[ok, "wald_p"] < 0.10).sum())
            lines.append(f"| {tau:g} | {int(ok.sum())} | {sig} | {100 * sig / max(int(ok.sum()), 1):.1f}% |")
        lines += ["", "## Goodness of fit", "", "| tau | median R1 | AIC below AR-QR |", "|---|---|---|"]
        for tau, g in coef.groupby("tau"):
            lines.append(f"| {tau:g} | {g['r1'].median():.3f} | "
                         f"{100 * (g['aic'] < g['aic_ar']).mean():.1f}% |")
        lines.append("")

    risk_p = layout.stage("risk") / "risk.csv"
    if risk_p.exists():
        inputs.append(risk_p)
        rk = read_table(risk_p)
        rk["reason"] = rk["reason"].fillna("")
        last = rk[rk["date"] == rk["date"].max()].copy()
        write_table(last, d / "risk_latest.csv", precision=12)
        iar_col = next(c for c in rk.columns if c.startswith("iar"))
        dar_col = next(c for c in rk.columns if c.startswith("dar"))
        lines += [f"## Tail risk at {last['date'].iloc[0]}", "",
                  f"- median {iar_col}: {last[iar_col].median():.3f}",
                  f"- median {dar_col}: {last[dar_col].median():.3f}",
                  f"- crossing quantiles rearranged: {int(rk['crossing_flag'].sum())} of {len(rk)} rows", ""]

    scores_p = layout.stage("evaluate") / "scores.csv"
    if scores_p.exists():
        inputs += [scores_p, layout.stage("evaluate") / "summary.csv"]
        sc = read_table(scores_p)
        sc["reason"] = sc["reason"].fillna("")
        sc = sc[sc["model"] != BENCHMARK]
        wide = sc.pivot_table(index=["code", "model"], columns="tau", values="ratio_QS", aggfunc="first", dropna=False)
        wide.columns = [f"ratio_QS_{_tau_label(t)}" for t in wide.columns]
        crps = [c for c in sc.columns if c.startswith("ratio_CRPS")]
        dmc = [c for c in sc.columns if c.startswith("dm_p_CRPS")]
        extra = sc.groupby(["code", "model"], sort=False)[crps + dmc].first()
        ratios = wide.join(extra).reset_index()
        ratios.insert(1, "region", ratios["code"].map(lambda c: meta[c].region))
        ratios.insert(2, "income", ratios["code"].map(lambda c: meta[c].income))
        order = {c: j for j, c in enumerate(meta)}
        ratios = ratios.sort_values(["model", "code"], key=lambda s: s.map(order) if s.name == "code" else s)
        write_table(ratios, d / "ratios.csv")
        summ = read_table(layout.stage("evaluate") / "summary.csv")
        write_table(summ, d / "significance.csv")
        lines += ["## Out-of-sample comparison against AR-QR (DM p < 0.10)", "",
                  "| model | metric | share significant | share ratio < 1 |", "|---|---|---|---|"]
        for r in summ[summ["group_type"] == "all"].itertuples(index=False):
            lines.append(f"| {r.model} | {r.metric} | {r.pct_significant:.1f}% | {r.pct_ratio_below_1:.1f}% |")
        lines.append("")

    if not inputs:
        raise ValidationError("nothing to report; run the fit, risk or evaluate stage first")
    (d / "report.md").write_text("\n".join(lines))
    return inputs + [layout.stage("ingest") / "meta.csv"]


RUNNERS: dict[str, Callable[[RunConfig, Layout], list[Path]]] = {
    "ingest": stage_ingest,
    "preprocess": stage_preprocess,
    "factors": stage_factors,
    "fit": stage_fit,
    "density": stage_density,
    "risk": stage_risk,
    "evaluate": stage_evaluate,
    "report": stage_report,
}


def run_stage(cfg: RunConfig, stage: str) -> None:
    layout = Layout(Path(cfg.out))
    try:
        layout.root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {cfg.out}: {exc}") from None
    if not os.access(layout.root, os.W_OK):
        raise ValidationError(f"output directory {cfg.out} is not writable")
    log.info("stage %s", stage)
    try:
        inputs = RUNNERS[stage](cfg, layout)
    except (InflRiskError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _with_context(exc, stage=stage)
        raise
    write_manifest(cfg, layout, stage, inputs)


def run_pipeline(cfg: RunConfig, stages: Iterable[str] | None = None) -> None:
    """Run the enabled stages in pipeline order."""
    wanted = set(cfg.stages if stages is None else stages)
    for s in STAGES:
        if s in wanted:
            run_stage(cfg, s)


def exit_code(exc: BaseException) -> int:
    """1 for invalid input or configuration, 2 for numerical failure."""
    if isinstance(exc, (NumericalError, ArithmeticError, np.linalg.LinAlgError)):
        return 2
    return 1
