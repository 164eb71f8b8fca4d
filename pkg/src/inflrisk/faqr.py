"""Factor-augmented quantile regressions with sandwich inference.

Each country's next-month inflation is regressed on a constant, its own
current inflation and the current values of the factors its block structure
allows.  Factors enter with unit variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .errors import SingularHessian, SingularRestriction, ZeroDenominator
from .ingest import InflationPanel
from .mldfm import FACTOR_NAMES, BlockStructure, FactorSet
from .qr import QuantileFit, check_loss, empirical_quantile, fit_qr

REGRESSORS = ("lag",) + FACTOR_NAMES

# bias term b(k, T) of the information criterion
BiasTerm = Callable[[int, int], float]


def default_bias(k: int, T: int) -> float:
    return k / T


@dataclass(frozen=True)
class QuantileSpec:
    tau: float
    country: int
    regressors: tuple[str, ...] = REGRESSORS

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        bad = [r for r in self.regressors if r not in REGRESSORS]
        if bad:
            raise ValueError(f"unknown regressors {bad}")
        if len(set(self.regressors)) != len(self.regressors):
            raise ValueError("duplicate regressors")
        # canonical order: lag first, then factors in FactorSet order
        object.__setattr__(
            self, "regressors", tuple(r for r in REGRESSORS if r in self.regressors)
        )

    @property
    def factors(self) -> tuple[str, ...]:
        return tuple(r for r in self.regressors if r != "lag")

    @property
    def names(self) -> tuple[str, ...]:
        return ("const",) + self.regressors


def full_spec(structure: BlockStructure, i: int, tau: float) -> QuantileSpec:
    """Lag plus every factor the country loads on."""
    return QuantileSpec(tau, i, ("lag",) + tuple(structure.allowed(i)))


def design(
    y: np.ndarray, F: np.ndarray | None, names: Sequence[str], regressors: Sequence[str]
) -> tuple[np.ndarray, np.ndarray]:
    """Response ``y[1:]`` and design ``[1, y[:-1], F[:-1, sel]]``.

    ``F`` holds unit-variance factors with columns labelled by ``names``.
    """
    y = np.asarray(y, dtype=float)
    cols = [np.ones(y.size - 1)]
    for r in regressors:
        if r == "lag":
            cols.append(y[:-1])
        else:
            cols.append(F[:-1, list(names).index(r)])
    return y[1:], np.column_stack(cols)


def forecast_row(y_last: float, f_last: np.ndarray | None, names, regressors) -> np.ndarray:
    """Regressor row for the one-step-ahead forecast from the last observation."""
    row = [1.0]
    for r in regressors:
        row.append(y_last if r == "lag" else f_last[list(names).index(r)])
    return np.array(row)


def hall_sheather(n: int, tau: float, alpha: float = 0.05) -> float:
    """Hall-Sheather bandwidth on the probability scale."""
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    q = stats.norm.ppf(tau)
    f = stats.norm.pdf(q)
    h = n ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * (1.5 * f**2 / (2.0 * q**2 + 1.0)) ** (1.0 / 3.0)
    while tau - h <= 0.0 or tau + h >= 1.0:
        h /= 2.0
    return h


def sandwich_cov(fit: QuantileFit, X: np.ndarray | None = None, tau: float | None = None) -> np.ndarray:
    """Powell kernel sandwich ``tau(1-tau) H^-1 (X'X/n) H^-1 / n``.

    ``H = sum K(u_t/h) x_t x_t' / (n h)`` with a Gaussian kernel.  The
    bandwidth is Hall-Sheather on the probability scale, mapped to the
    residual scale as ``(Q(tau+h) - Q(tau-h))/2`` under a normal with the
    robust residual scale ``min(sd, IQR/1.34)``.
    """
    X = fit.X if X is None else np.asarray(X, dtype=float)
    tau = fit.tau if tau is None else tau
    u = fit.residuals
    n, k = X.shape
    hp = hall_sheather(n, tau)
    q75, q25 = np.percentile(u, [75, 25])
    scale = min(np.std(u, ddof=1), (q75 - q25) / 1.34)
    h = 0.5 * (stats.norm.ppf(tau + hp) - stats.norm.ppf(tau - hp)) * scale
    if not np.isfinite(h) or h <= 0:
        raise SingularHessian("kernel bandwidth collapsed to zero")
    w = stats.norm.pdf(u / h) / h
    H = (X * w[:, None]).T @ X / n
    J = X.T @ X / n
    try:
        Hinv = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        raise SingularHessian("kernel-weighted Gram matrix is singular") from None
    if not np.all(np.isfinite(Hinv)) or np.linalg.cond(H) > 1e14:
        raise SingularHessian("kernel-weighted Gram matrix is singular")
    cov = tau * (1.0 - tau) * Hinv @ J @ Hinv / n
    return 0.5 * (cov + cov.T)


def wald_test(theta: np.ndarray, cov: np.ndarray, idx: Sequence[int], df2: int) -> tuple[float, float]:
    """F statistic and p-value for ``theta[idx] = 0``."""
    idx = list(idx)
    m = len(idx)
    if m == 0:
        raise SingularRestriction("no restrictions to test")
    b = theta[idx]
    V = cov[np.ix_(idx, idx)]
    if not np.any(b):
        return 0.0, 1.0
    try:
        stat = float(b @ np.linalg.solve(V, b)) / m
    except np.linalg.LinAlgError:
        raise SingularRestriction("restricted covariance block is singular") from None
    if not np.isfinite(stat) or stat < 0:
        raise SingularRestriction("restricted covariance block is not positive definite")
    return stat, float(stats.f.sf(stat, m, df2))


def wald_factor_test(fit: QuantileFit) -> tuple[float, float]:
    """Joint test that every factor coefficient is zero, referred to F(m, n-k)."""
    if fit.cov is None:
        raise SingularRestriction("fit carries no covariance matrix")
    idx = [j for j, nm in enumerate(fit.names) if nm not in ("const", "lag")]
    return wald_test(fit.theta, fit.cov, idx, fit.n - fit.k)


def pvalues(fit: QuantileFit) -> np.ndarray:
    """Two-sided p-values of the individual coefficients (t with n-k df)."""
    se = fit.se
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, fit.theta / se, np.where(fit.theta == 0, 0.0, np.inf))
    return 2.0 * stats.t.sf(np.abs(t), fit.n - fit.k)


def r1(fit: QuantileFit, y: np.ndarray | None = None, tau: float | None = None) -> float:
    """One minus the ratio of the fit's check loss to that of the empirical quantile."""
    y = fit.y if y is None else np.asarray(y, dtype=float)
    tau = fit.tau if tau is None else tau
    base = check_loss(y - empirical_quantile(y, tau), tau).sum()
    if base <= 0:
        raise ZeroDenominator("response is constant; R1 undefined")
    return float(1.0 - fit.objective / base)


def aic(fit: QuantileFit, T: int | None = None, b: BiasTerm = default_bias) -> float:
    """``2T ln(loss/T) + 2T b(k, T)``.

    ``T`` is the length of the panel the fit was drawn from (one more than
    the number of regression observations for a first-order lag model); by
    default it is taken as ``n + 1``.
    """
    T = fit.n + 1 if T is None else T
    return float(2 * T * np.log(fit.objective / T) + 2 * T * b(fit.k, T))


def _finish(fit: QuantileFit, T: int, b: BiasTerm, with_cov: bool) -> QuantileFit:
    cov = sandwich_cov(fit) if with_cov else None
    try:
        r = r1(fit)
    except ZeroDenominator:
        r = float("nan")
    with np.errstate(divide="ignore"):
        a = aic(fit, T, b)
    return fit.with_(cov=cov, r1=r, aic=a)


def fa_qr(
    panel: InflationPanel | np.ndarray,
    factors: FactorSet | np.ndarray | None,
    spec: QuantileSpec,
    b: BiasTerm = default_bias,
    with_cov: bool = True,
) -> QuantileFit:
    """Fit one (country, tau) factor-augmented quantile regression.

    ``factors`` may be a FactorSet (unit-norm columns, rescaled here to unit
    variance) or a T x 8 array of regressors already on the desired scale,
    with columns in the standard factor order.
    """
    values = panel.values if isinstance(panel, InflationPanel) else np.asarray(panel, float)
    y = values[:, spec.country]
    if spec.factors:
        if isinstance(factors, FactorSet):
            F, names = factors.scaled(), factors.names
        else:
            F, names = np.asarray(factors, dtype=float), FACTOR_NAMES
    else:
        F, names = None, FACTOR_NAMES
    yy, X = design(y, F, names, spec.regressors)
    # identically zero factor columns carry no information: fit without them
    # and report their coefficients as exact zeros
    keep = np.array([nm in ("const", "lag") or np.any(X[:, j]) for j, nm in enumerate(spec.names)])
    if keep.all():
        fit = fit_qr(yy, X, spec.tau, names=spec.names)
        return _finish(fit, values.shape[0], b, with_cov)
    names_kept = tuple(nm for nm, k in zip(spec.names, keep) if k)
    fit = _finish(fit_qr(yy, X[:, keep], spec.tau, names=names_kept), values.shape[0], b, with_cov)
    theta = np.zeros(keep.size)
    theta[keep] = fit.theta
    cov = None
    if fit.cov is not None:
        cov = np.zeros((keep.size, keep.size))
        cov[np.ix_(keep, keep)] = fit.cov
    return fit.with_(theta=theta, cov=cov, names=spec.names, X=X)


def ar_qr(panel, i: int, tau: float, b: BiasTerm = default_bias, with_cov: bool = True) -> QuantileFit:
    """The autoregressive benchmark: constant and own lag only."""
    return fa_qr(panel, None, QuantileSpec(tau, i, ("lag",)), b, with_cov)
