"""Linear quantile regression (check-loss minimization) as a linear program.

The primary solver walks between basic solutions -- coefficient vectors that
fit exactly ``k`` observations -- choosing at each step the edge with the
most negative directional derivative and performing an exact weighted-median
line search along it.  Every step strictly lowers the objective, so the walk
terminates at an optimal vertex.  When the optimum is not unique the
lexicographically smallest optimal vertex is located with a sequence of
HiGHS linear programs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize, sparse

from .errors import RankDeficientDesign, SolverFailure, Unbounded


@dataclass(frozen=True, eq=False)
class QuantileFit:
    theta: np.ndarray
    residuals: np.ndarray
    objective: float
    tau: float
    names: tuple[str, ...] = ()
    basis: np.ndarray | None = None
    cov: np.ndarray | None = None
    r1: float = float("nan")
    aic: float = float("nan")
    X: np.ndarray | None = field(default=None, repr=False)
    y: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.residuals.size

    @property
    def k(self) -> int:
        return self.theta.size

    @property
    def se(self) -> np.ndarray:
        if self.cov is None:
            raise ValueError("fit carries no covariance matrix")
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def with_(self, **kw) -> "QuantileFit":
        return replace(self, **kw)


def check_loss(u: np.ndarray, tau: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


def _validate(y, X, tau):
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if y.size != n:
        raise ValueError(f"y has {y.size} rows, X has {n}")
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if n < k:
        raise RankDeficientDesign(f"{n} observations for {k} coefficients")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("non-finite values in y or X")
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficientDesign("design matrix is rank deficient")
    return y, X


def _initial_basis(y, X, tau):
    """k well-conditioned observations closest to a shifted least-squares fit."""
    n, k = X.shape
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ beta
    # when an intercept is present, moving it to the tau-quantile of the LS
    # residuals gives a much better starting vertex
    if np.any(np.ptp(X, axis=0) == 0):
        r = r - np.quantile(r, tau)
    order = np.argsort(np.abs(r), kind="stable")
    rows: list[int] = []
    Q = np.zeros((k, 0))
    for i in order:
        x = X[i]
        resid = x - Q @ (Q.T @ x)
        nrm = np.linalg.norm(resid)
        if nrm > 1e-8 * max(1.0, np.linalg.norm(x)):
            rows.append(int(i))
            Q = np.column_stack([Q, resid / nrm])
            if len(rows) == k:
                break
    if len(rows) < k:
        raise RankDeficientDesign("could not find a nonsingular basis")
    return np.array(rows)


def _vertex_descent(y, X, tau, h, max_iter):
    """Walk from basis ``h`` to an optimal vertex.

    Returns (basis, theta, min_edge_slope) or None if the iteration cap was hit.
    """
    n, k = X.shape
    scale = 1.0 + np.abs(y).max()
    rtol = 1e-11 * scale
    xscale = 1.0 + np.abs(X).sum(axis=1).mean()
    dtol = 1e-10 * xscale
    h = h.copy()
    inb = np.zeros(n, dtype=bool)
    inb[h] = True
    for _ in range(max_iter):
        Xh = X[h]
        try:
            Xh_inv = np.linalg.inv(Xh)
        except np.linalg.LinAlgError:
            return None
        theta = Xh_inv @ y[h]
        r = y - X @ theta
        r[h] = 0.0
        nb = np.flatnonzero(~inb)
        rn = r[nb]
        A = X[nb] @ Xh_inv  # A[i, j] = x_i' (column j of Xh^{-1})
        zero = np.abs(rn) <= rtol
        psi = np.where(rn < 0, tau - 1.0, tau)
        psi[zero] = 0.0
        lin = -(psi @ A)  # slope contribution of nonzero residuals, sigma=+1
        if zero.any():
            Az = A[zero]
            pos = np.maximum((1 - tau) * Az, -tau * Az).sum(axis=0)
            neg = np.maximum(-(1 - tau) * Az, tau * Az).sum(axis=0)
        else:
            pos = neg = np.zeros(k)
        d_plus = lin + pos + (1.0 - tau)
        d_minus = -lin + neg + tau
        slopes = np.concatenate([d_plus, d_minus])
        best = int(np.argmin(slopes))
        if slopes[best] >= -dtol:
            return h, theta, float(slopes.min())
        j, sigma = (best, 1.0) if best < k else (best - k, -1.0)

        a = sigma * A[:, j]
        live = (~zero) & (a != 0)
        t = np.full(nb.size, np.inf)
        t[live] = rn[live] / a[live]
        cand = np.flatnonzero(live & (t > 0))
        if cand.size == 0:
            raise Unbounded("check-loss objective unbounded along an edge")
        cand = cand[np.argsort(t[cand], kind="stable")]
        slope = slopes[best] + np.cumsum(np.abs(a[cand]))
        stop = int(np.searchsorted(slope >= 0, True))
        if stop >= cand.size:
            raise Unbounded("check-loss objective unbounded along an edge")
        enter = int(nb[cand[stop]])
        inb[h[j]] = False
        h[j] = enter
        inb[enter] = True
    return None


def _highs_solve(y, X, tau, extra_ub=None, c_theta=None, bounds_theta=None):
    n, k = X.shape
    A_eq = sparse.hstack([sparse.csr_matrix(X), sparse.eye(n), -sparse.eye(n)]).tocsr()
    c = np.concatenate([np.zeros(k), np.full(n, tau), np.full(n, 1.0 - tau)])
    A_ub = b_ub = None
    if extra_ub is not None:
        A_ub, b_ub = extra_ub
    if c_theta is not None:
        c = np.concatenate([c_theta, np.zeros(2 * n)])
    bounds = (bounds_theta or [(None, None)] * k) + [(0, None)] * (2 * n)
    res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=y,
                           bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverFailure(f"HiGHS failed: {res.message}")
    return res.x[:k]


def _snap_to_vertex(y, X, theta, tau):
    """Closest basic solution to ``theta`` (fits the k smallest residuals)."""
    r = y - X @ theta
    order = np.argsort(np.abs(r), kind="stable")
    rows = []
    for i in order:
        cand = rows + [int(i)]
        if np.linalg.matrix_rank(X[cand], tol=1e-10) == len(cand):
            rows = cand
            if len(rows) == X.shape[1]:
                break
    h = np.array(rows)
    return h, np.linalg.solve(X[h], y[h])


def _lexicographic(y, X, tau, fstar):
    """Lexicographically smallest theta on the optimal face."""
    n, k = X.shape
    tol = 1e-9 * max(1.0, abs(fstar))
    row = np.concatenate([np.zeros(k), np.full(n, tau), np.full(n, 1.0 - tau)])
    A_ub = [row]
    b_ub = [fstar + tol]
    bounds = [(None, None)] * k
    theta = None
    for j in range(k):
        c = np.zeros(k)
        c[j] = 1.0
        theta = _highs_solve(y, X, tau, (np.array(A_ub), np.array(b_ub)), c, bounds)
        slack = 1e-9 * max(1.0, abs(theta[j]))
        bounds[j] = (None, theta[j] + slack)
    return theta


def fit_qr(
    y: np.ndarray,
    X: np.ndarray,
    tau: float,
    names: Sequence[str] = (),
    max_iter: int | None = None,
    tie_break: bool = True,
) -> QuantileFit:
    """Minimize ``sum(check_loss(y - X @ theta, tau))`` exactly.

    Returns an optimal basic solution; ties between optimal vertices are
    resolved in favour of the lexicographically smallest coefficient vector.
    """
    y, X = _validate(y, X, tau)
    n, k = X.shape
    h0 = _initial_basis(y, X, tau)
    out = _vertex_descent(y, X, tau, h0, max_iter or 50 * (n + k))
    if out is None:
        theta = _highs_solve(y, X, tau)
        h, theta = _snap_to_vertex(y, X, theta, tau)
        obj = check_loss(y - X @ theta, tau).sum()
        ref = check_loss(y - X @ _highs_solve(y, X, tau), tau).sum()
        if obj > ref + 1e-8 * max(1.0, ref):
            raise SolverFailure("could not locate an optimal vertex")
        min_slope = 0.0
    else:
        h, theta, min_slope = out
    obj = float(check_loss(y - X @ theta, tau).sum())

    xscale = 1.0 + np.abs(X).sum(axis=1).mean()
    if tie_break and min_slope <= 1e-9 * xscale:
        # a zero-slope edge: the optimum may be a face rather than a vertex
        lex = _lexicographic(y, X, tau, obj)
        h2, th2 = _snap_to_vertex(y, X, lex, tau)
        obj2 = float(check_loss(y - X @ th2, tau).sum())
        if obj2 <= obj + 1e-9 * max(1.0, obj):
            h, theta, obj = h2, th2, obj2

    resid = y - X @ theta
    return QuantileFit(
        theta=theta, residuals=resid, objective=obj, tau=float(tau),
        names=tuple(names) if names else tuple(f"x{j}" for j in range(k)),
        basis=np.sort(h), X=X, y=y,
    )


def empirical_quantile(y: np.ndarray, tau: float) -> float:
    """The order statistic ``y_(ceil(n*tau))``, a minimizer of the check loss."""
    y = np.sort(np.asarray(y, dtype=float))
    idx = int(np.ceil(y.size * tau)) - 1
    return float(y[min(max(idx, 0), y.size - 1)])
