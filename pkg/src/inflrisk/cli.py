"""Command-line interface: ``inflrisk <stage> [options]``.

Settings come from built-in defaults, then an optional YAML or JSON config
file (``--config``), then command-line flags, later sources winning.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .errors import ValidationError
from .ingest import write_meta, write_prices
from .mldfm import FACTOR_NAMES
from .pipeline import STAGES, RunConfig, exit_code, run_pipeline, run_stage, write_table
from .synthetic import inflation_to_cpi, simulate_inflation_panel

log = logging.getLogger("inflrisk")

STAGE_HELP = {
    "ingest": "read CPI levels and metadata, write annualized monthly inflation",
    "preprocess": "seasonal adjustment and outlier clamping",
    "factors": "estimate the multi-level factors, loadings and bands",
    "fit": "per-country quantile regressions with Wald tests, R1 and AIC",
    "density": "skewed-t fits to the fitted quantiles plus density grids",
    "risk": "Inflation-at-Risk and Deflation-at-Risk probabilities",
    "evaluate": "rolling out-of-sample comparison against AR-QR",
    "report": "summary tables from the fit, risk and evaluate outputs",
}


def _global_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="YAML or JSON file with settings (flags override it)")
    g.add_argument("--out", help="output directory (default inflrisk_out)")
    g.add_argument("--seed", type=int, help="seed for every randomized restart (default 0)")
    g.add_argument("--jobs", type=int, help="worker processes (default 1)")
    g.add_argument("--taus", help="comma-separated quantile levels (default 0.05,0.25,0.5,0.75,0.95)")
    g.add_argument("--exclude", help="comma-separated country codes to drop at ingest")
    g.add_argument("-v", "--verbose", action="count", help="more logging (repeatable)")
    return p


def _stage_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = p.add_argument_group("inputs")
    g.add_argument("--prices", help="CPI levels CSV, wide (date + one column per code) or long")
    g.add_argument("--meta", help="country metadata CSV with code,name,region,income")
    g = p.add_argument_group("preprocess")
    g.add_argument("--restarts", type=int, help="likelihood restarts per series (default 5)")
    g.add_argument("--outlier-k", type=float, help="outlier fence in IQR units (default 10)")
    g.add_argument("--seasonal-level", help="level of the seasonality pre-test, or 'none' (default 0.01)")
    g = p.add_argument_group("factors")
    g.add_argument("--tol", type=float, help="convergence tolerance on the loadings (default 1e-6)")
    g.add_argument("--max-iter", type=int, help="maximum sweeps (default 1000)")
    g.add_argument("--band-level", type=float, help="coverage of the factor bands (default 0.95)")
    g.add_argument("--scree-threshold", type=float, help="eigenvalue share cut-off (default 0.05)")
    g = p.add_argument_group("density and risk")
    g.add_argument("--quantile-source", choices=("fitted", "rolling"),
                   help="fitted in-sample quantiles or rolling forecasts (default fitted)")
    g.add_argument("--risk-model", help="model whose rolling forecasts feed the densities (default M1)")
    g.add_argument("--density-dates", help="comma-separated YYYY-MM months for the density grid (default last)")
    g.add_argument("--density-points", type=int, help="grid points per density (default 201)")
    g.add_argument("--iar-threshold", type=float, help="Inflation-at-Risk threshold in percent (default 3)")
    g.add_argument("--dar-threshold", type=float, help="Deflation-at-Risk threshold in percent (default 0)")
    g = p.add_argument_group("evaluate")
    g.add_argument("--models", help="comma-separated models among M1,M2,M3,M4,M5,MB,AR_QR")
    g.add_argument("--split", help="in-sample length and forecast count as R:P (default 155:132)")
    g.add_argument("--mb-level", type=float, help="individual-significance level for MB (default 0.10)")
    g.add_argument("--dm-level", type=float, help="level for the rejection shares (default 0.10)")
    g.add_argument("--fluct-m", help="fluctuation window in forecasts, or 'auto' (default 0.3 P)")
    g.add_argument("--fluct-alpha", type=float, help="fluctuation test level, 0.05 or 0.10")
    return p


def build_parser() -> argparse.ArgumentParser:
    glob = _global_options()
    stage = _stage_options()
    parser = argparse.ArgumentParser(
        prog="inflrisk",
        description="Inflation-at-Risk from factor-augmented quantile regressions.",
        parents=[glob],
        argument_default=argparse.SUPPRESS,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name in STAGES:
        sub.add_parser(name, parents=[glob, stage], help=STAGE_HELP[name], description=STAGE_HELP[name],
                       argument_default=argparse.SUPPRESS)
    run = sub.add_parser("run", parents=[glob, stage], help="run several stages in order",
                         description="Run the enabled stages in pipeline order.",
                         argument_default=argparse.SUPPRESS)
    run.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)} (default all)")
    sim = sub.add_parser("simulate", parents=[glob], help="write a synthetic CPI panel and metadata",
                         description="Write prices.csv, meta.csv and factors.csv for a synthetic panel.",
                         argument_default=argparse.SUPPRESS)
    sim.add_argument("--months", type=int, default=288, help="inflation months (default 288)")
    sim.add_argument("--start", default="1999-01", help="first inflation month (default 1999-01)")
    sim.add_argument("--factor-effect", type=float, default=1.0, help="factor loading scale (default 1)")
    sim.add_argument("--tail-effect", type=float, default=1.0, help="upper-tail widening (default 1)")
    sim.add_argument("--rho", type=float, default=0.9, help="factor AR(1) coefficient (default 0.9)")
    return parser


def _load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path} is not valid YAML or JSON: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"config file {path} must hold a key-value mapping")
    return data


_NOT_SETTINGS = {"command", "config", "verbose", "months", "start", "factor_effect", "tail_effect", "rho"}


def resolve_config(ns: argparse.Namespace) -> RunConfig:
    values = _load_config_file(ns.config) if getattr(ns, "config", None) else {}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    values.update({k: v for k, v in vars(ns).items() if k not in _NOT_SETTINGS})
    return RunConfig.from_mapping(values)


def _simulate(cfg: RunConfig, ns: argparse.Namespace) -> None:
    if ns.months < 40:
        raise ValidationError("simulate needs at least 40 months")
    if not -1.0 < ns.rho < 1.0:
        raise ValidationError("--rho must lie strictly between -1 and 1")
    panel, F = simulate_inflation_panel(
        T=ns.months, start=ns.start, rng=np.random.default_rng(cfg.seed),
        factor_effect=ns.factor_effect, tail_effect=ns.tail_effect, rho=ns.rho,
    )
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_prices(inflation_to_cpi(panel), out / "prices.csv")
    write_meta(panel.meta, out / "meta.csv")
    fdf = pd.DataFrame(F, columns=FACTOR_NAMES)
    fdf.insert(0, "date", panel.dates.strftime("%Y-%m"))
    write_table(fdf, out / "factors.csv", precision=17)
    log.info("wrote a %d x %d synthetic panel to %s", panel.T, panel.N, out)


def _describe(exc: BaseException) -> str:
    ctx = dict(getattr(exc, "context", None) or {})
    where = ", ".join(f"{k}={v}" for k, v in ctx.items())
    return f"{where}: " if where else ""


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(getattr(ns, "verbose", 0), logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(ns)
        if ns.command == "simulate":
            _simulate(cfg, ns)
        elif ns.command == "run":
            run_pipeline(cfg)
        else:
            run_stage(cfg, ns.command)
    except (ValueError, ArithmeticError, OSError) as exc:
        code = exit_code(exc)
        kind = "numerical failure" if code == 2 else "invalid input"
        print(f"inflrisk: {kind}: {_describe(exc)}{type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
