"""Skewed-t densities fitted to a grid of conditional quantiles, and tail risk.

The distribution is the Azzalini-Capitanio skew-t with location ``xi``,
scale ``omega``, slant ``alpha`` and degrees of freedom ``nu``.  The public
CDF integrates the density with adaptive quadrature and the public quantile
inverts it by bisection.  Fitting uses a faster route: the least-squares
location and scale are profiled out in closed form, the remaining
(alpha, nu) search runs on a precomputed table of standardized quantiles,
and the final quantiles are recomputed with a Newton solve on a composite
Gauss-Legendre CDF.
"""

from __future__ import annotations

import functools
import logging
import warnings
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, special

from .errors import DegenerateQuantiles, InvalidParams, OptimizerFailure

log = logging.getLogger(__name__)

DEFAULT_TAUS = (0.05, 0.25, 0.5, 0.75, 0.95)


@dataclass(frozen=True)
class SkewTParams:
    xi: float
    omega: float
    alpha: float
    nu: float

    def __post_init__(self):
        vals = (self.xi, self.omega, self.alpha, self.nu)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidParams(f"non-finite skew-t parameters {vals}")
        if self.omega <= 0 or self.nu <= 0:
            raise InvalidParams(f"omega and nu must be positive, got {self.omega}, {self.nu}")


@dataclass(frozen=True)
class RiskMeasures:
    iar: float
    dar: float
    threshold_iar: float
    threshold_dar: float


# ---------------------------------------------------------------------------
# standardized density and the reference CDF / quantile


def _std_pdf(z, alpha, nu):
    z = np.asarray(z, dtype=float)
    logt = (special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
            - 0.5 * np.log(nu * np.pi) - (nu + 1) / 2 * np.log1p(z * z / nu))
    arg = alpha * z * np.sqrt((nu + 1) / (nu + z * z))
    return 2.0 * np.exp(logt) * special.stdtr(nu + 1, arg)


def _cdf_at_zero(alpha):
    return 0.5 - np.arctan(alpha) / np.pi


def skewt_density(p: SkewTParams, y):
    z = (np.asarray(y, dtype=float) - p.xi) / p.omega
    return _std_pdf(z, p.alpha, p.nu) / p.omega


def _std_cdf_quad(z: float, alpha: float, nu: float) -> float:
    """CDF from the closed-form mass below the location plus quadrature.

    Within 1e-3 of 0 or 1 the value is recomputed as a tail integral, which
    has relative accuracy there, so the CDF stays monotone to rounding.
    """
    f = lambda x: float(_std_pdf(x, alpha, nu))
    kw = dict(epsabs=1e-8, epsrel=1e-10, limit=200)
    # far-tail masses sit near quad's error floor, where it warns about
    # roundoff without losing accuracy that matters
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val = 0.0 if z < -50.0 else 1.0 if z > 50.0 else np.nan
        if np.isnan(val):
            # for large |alpha| the mass on the short side sits within
            # ~1/|alpha| of the location; integrate that stretch separately
            b = np.sign(z) * min(abs(z), 10.0 / max(abs(alpha), 1.0))
            val = _cdf_at_zero(alpha) + integrate.quad(f, 0.0, b, **kw)[0]
            if b != z:
                val += integrate.quad(f, b, z, **kw)[0]
        if min(val, 1.0 - val) < 1e-3:
            tail = dict(kw, epsabs=0.0)
            if z < 0:
                val = integrate.quad(f, -np.inf, z, **tail)[0]
            else:
                val = 1.0 - integrate.quad(f, z, np.inf, **tail)[0]
    return float(min(max(val, 0.0), 1.0))


def skewt_cdf(p: SkewTParams, y):
    """CDF by adaptive quadrature of the density from the location."""
    z = (np.asarray(y, dtype=float) - p.xi) / p.omega
    if z.ndim == 0:
        return _std_cdf_quad(float(z), p.alpha, p.nu)
    return np.array([_std_cdf_quad(v, p.alpha, p.nu) for v in z.ravel()]).reshape(z.shape)


def skewt_quantile(p: SkewTParams, tau, tol: float = 1e-8):
    """Quantile by bisection on the quadrature CDF (width ``tol`` in y units)."""
    taus = np.atleast_1d(np.asarray(tau, dtype=float))
    if np.any((taus <= 0) | (taus >= 1)):
        raise InvalidParams("tau must lie in (0, 1)")
    out = np.empty_like(taus)
    for j, t in enumerate(taus):
        lo, hi = -1.0, 1.0
        while _std_cdf_quad(lo, p.alpha, p.nu) > t:
            lo *= 2.0
        while _std_cdf_quad(hi, p.alpha, p.nu) < t:
            hi *= 2.0
        while (hi - lo) * p.omega > tol:
            mid = 0.5 * (lo + hi)
            if _std_cdf_quad(mid, p.alpha, p.nu) < t:
                lo = mid
            else:
                hi = mid
        out[j] = p.xi + p.omega * 0.5 * (lo + hi)
    return out if np.ndim(tau) else float(out[0])


# ---------------------------------------------------------------------------
# fast vectorized CDF and quantiles for fitting

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _std_cdf_gl(z, alpha, nu):
    """Standardized CDF by composite Gauss-Legendre on geometric panels.

    ``z``, ``alpha`` and ``nu`` broadcast to a common 1-d shape.
    """
    z, alpha, nu = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, float)) for a in (z, alpha, nu)))
    m = z.size
    az = np.abs(z)
    top = max(float(az.max()), 1.0)
    base = 2.0 ** np.arange(-6, int(np.ceil(np.log2(top))) + 1)
    a_edges = 2.0 ** np.arange(-3, 5)[None, :] / np.maximum(np.abs(alpha), 1.0)[:, None]
    a_edges = np.where(np.abs(alpha)[:, None] > 8.0, a_edges, 0.0)
    edges = np.concatenate([np.zeros((m, 1)), np.broadcast_to(base, (m, base.size)), a_edges], axis=1)
    edges = np.minimum(np.sort(edges, axis=1), az[:, None])
    a, b = edges[:, :-1], edges[:, 1:]
    half = 0.5 * (b - a)
    nodes = (a + half)[..., None] + half[..., None] * _GL_X
    sgn = np.sign(z)[:, None, None]
    dens = _std_pdf(sgn * nodes, alpha[:, None, None], nu[:, None, None])
    integral = np.einsum("mpn,n,mp->m", dens, _GL_W, half)
    return np.clip(_cdf_at_zero(alpha) + np.sign(z) * integral, 0.0, 1.0)


def _std_quantiles(taus, alpha, nu, z0=None, max_iter: int = 60):
    """Safeguarded Newton solve of ``F(z) = tau`` for standardized skew-t."""
    taus, alpha, nu = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, float)) for a in (taus, alpha, nu)))
    z = np.zeros(taus.size) if z0 is None else np.array(np.broadcast_to(z0, taus.shape), dtype=float)
    lo = np.full(taus.size, -np.inf)
    hi = np.full(taus.size, np.inf)
    done = np.zeros(taus.size, dtype=bool)
    for _ in range(max_iter):
        act = ~done
        F = _std_cdf_gl(z[act], alpha[act], nu[act])
        f = _std_pdf(z[act], alpha[act], nu[act])
        t = taus[act]
        za, loa, hia = z[act], lo[act], hi[act]
        below = F < t
        loa = np.where(below, np.maximum(loa, za), loa)
        hia = np.where(below, hia, np.minimum(hia, za))
        with np.errstate(divide="ignore", invalid="ignore"):
            step = (F - t) / f
            new = za - step
            bad = ~np.isfinite(new) | (new <= loa) | (new >= hia)
            both = np.isfinite(loa) & np.isfinite(hia)
            new = np.where(bad & both, 0.5 * (loa + hia), new)
            new = np.where(bad & ~both & np.isfinite(loa), loa + 2.0 * np.maximum(1.0, np.abs(loa)), new)
            new = np.where(bad & ~both & np.isfinite(hia), hia - 2.0 * np.maximum(1.0, np.abs(hia)), new)
            conv = (np.abs(F - t) < 1e-13) | (np.abs(new - za) < 1e-12 * np.maximum(1.0, np.abs(za)))
            conv |= both & ((hia - loa) < 1e-12 * np.maximum(1.0, np.abs(za)))
        z[act] = np.where(conv & ~bad, new, np.where(conv, za, new))
        lo[act], hi[act] = loa, hia
        done[act] = conv
        if done.all():
            break
    return z


# ---------------------------------------------------------------------------
# quantile table over (theta = arctan(alpha), log nu)

TABLE_THETA = np.linspace(-np.pi / 2, np.pi / 2, 181)
TABLE_LOGNU = np.arange(np.log(0.5), np.log(1e4) + 1e-9, 0.05)


def build_quantile_table(taus: Sequence[float] = DEFAULT_TAUS, theta=TABLE_THETA, lognu=TABLE_LOGNU) -> np.ndarray:
    """Standardized quantiles, shape (len(lognu), len(theta), len(taus))."""
    taus = np.asarray(taus, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(np.diff(taus) <= 0):
        raise ValueError("taus must be strictly increasing")
    symmetric = np.allclose(np.sort(1.0 - taus), taus) and np.allclose(theta, -theta[::-1])
    cols = np.flatnonzero(theta >= 0) if symmetric else np.arange(theta.size)
    # tan(pi/2) is a large finite number, which is the half-t limit
    alpha = np.tan(theta[cols])
    Q = np.empty((lognu.size, theta.size, taus.size))
    z0 = None
    for i in range(lognu.size - 1, -1, -1):
        nu = np.exp(lognu[i])
        A, TT = np.meshgrid(alpha, taus, indexing="ij")
        z = _std_quantiles(TT.ravel(), A.ravel(), nu, z0).reshape(A.shape)
        z0 = z.ravel()
        Q[i, cols] = z
        if symmetric:
            # Q(tau, -theta) = -Q(1 - tau, theta), taus ascending
            Q[i, theta.size - 1 - cols] = -z[:, ::-1]
    return Q


def _table_path():
    return resources.files("inflrisk").joinpath("data/skewt_quantiles.npz")


@functools.lru_cache(maxsize=8)
def quantile_table(taus: tuple[float, ...] = DEFAULT_TAUS) -> np.ndarray:
    path = _table_path()
    if path.is_file():
        with path.open("rb") as fh:
            data = np.load(fh)
            if (np.allclose(data["taus"], taus) and data["Q"].shape == (TABLE_LOGNU.size, TABLE_THETA.size, len(taus))):
                return data["Q"]
    log.warning("building skew-t quantile table for taus %s; this takes a few minutes", taus)
    return build_quantile_table(taus)


def save_quantile_table(path, taus: Sequence[float] = DEFAULT_TAUS) -> None:
    Q = build_quantile_table(taus)
    np.savez_compressed(path, Q=Q, taus=np.asarray(taus), theta=TABLE_THETA, lognu=TABLE_LOGNU)


def _keys_weights(s):
    """Cubic convolution (a = -1/2) weights for fractional offsets ``s``, shape (..., 4)."""
    s = np.asarray(s, dtype=float)[..., None]
    s2, s3 = s * s, s * s * s
    return np.concatenate([
        -0.5 * s3 + s2 - 0.5 * s,
        1.5 * s3 - 2.5 * s2 + 1.0,
        -1.5 * s3 + 2.0 * s2 + 0.5 * s,
        0.5 * s3 - 0.5 * s2,
    ], axis=-1)


class TableInterp:
    """Cubic convolution interpolation of standardized quantiles on the
    uniform (log nu, theta) grid.

    Interpolation runs on ``asinh(Q)``, which is far smoother than ``Q`` at
    small degrees of freedom.
    """

    def __init__(self, Q: np.ndarray):
        A = np.arcsinh(Q)
        # pad by linear extrapolation so every cell has a 4x4 neighbourhood
        A = np.concatenate([2 * A[:1] - A[1:2], A, 2 * A[-1:] - A[-2:-1]], axis=0)
        A = np.concatenate([2 * A[:, :1] - A[:, 1:2], A, 2 * A[:, -1:] - A[:, -2:-1]], axis=1)
        self.A = A
        self.x0, self.dx, self.nx = TABLE_LOGNU[0], TABLE_LOGNU[1] - TABLE_LOGNU[0], TABLE_LOGNU.size
        self.y0, self.dy, self.ny = TABLE_THETA[0], TABLE_THETA[1] - TABLE_THETA[0], TABLE_THETA.size

    def __call__(self, lognu, theta) -> np.ndarray:
        """Quantiles at each (lognu, theta) pair; shape (B, K) or (K,) for scalars."""
        scalar = np.ndim(lognu) == 0 and np.ndim(theta) == 0
        u = np.clip((np.atleast_1d(lognu) - self.x0) / self.dx, 0.0, self.nx - 1.0)
        v = np.clip((np.atleast_1d(theta) - self.y0) / self.dy, 0.0, self.ny - 1.0)
        i = np.minimum(u.astype(int), self.nx - 2)
        j = np.minimum(v.astype(int), self.ny - 2)
        wx = _keys_weights(u - i)
        wy = _keys_weights(v - j)
        off = np.arange(4)
        block = self.A[(i[:, None] + off)[:, :, None], (j[:, None] + off)[:, None, :]]
        out = np.sinh(np.einsum("bi,bj,bijk->bk", wx, wy, block))
        return out[0] if scalar else out


@functools.lru_cache(maxsize=8)
def table_interp(taus: tuple[float, ...] = DEFAULT_TAUS) -> TableInterp:
    return TableInterp(quantile_table(taus))


# ---------------------------------------------------------------------------
# fitting


def rearrange(q) -> tuple[np.ndarray, bool]:
    """Sort fitted quantiles; the flag reports whether they crossed."""
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("quantiles must be finite")
    crossed = bool(np.any(np.diff(q) < 0))
    return (np.sort(q) if crossed else q.copy()), crossed


def _profile(q: np.ndarray, Q0: np.ndarray):
    """Closed-form LS location and scale row by row; returns (xi, omega, ssr)."""
    qc = q - q.mean(axis=-1, keepdims=True)
    Qm = Q0.mean(axis=-1, keepdims=True)
    Qc = Q0 - Qm
    sxx = np.einsum("...k,...k->...", Qc, Qc)
    sxy = np.einsum("...k,...k->...", Qc, qc)
    with np.errstate(divide="ignore", invalid="ignore"):
        omega = np.where(sxx > 0, sxy / sxx, 0.0)
    omega = np.where(omega > 0, omega, 1e-12)
    xi = q.mean(axis=-1) - omega * Qm[..., 0]
    r = q - xi[..., None] - omega[..., None] * Q0
    return xi, omega, np.einsum("...k,...k->...", r, r)


@dataclass(frozen=True)
class SkewTFit:
    params: SkewTParams
    objective: float
    fitted: np.ndarray
    start_objectives: tuple[float, ...]
    crossing: bool = False

    @property
    def heavy_tail(self) -> bool:
        """Degrees of freedom below 2 (infinite variance)."""
        return self.params.nu < 2.0


def check_quantiles(q, n: int) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (n,):
        raise DegenerateQuantiles(f"expected {n} quantiles, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise DegenerateQuantiles("non-finite quantiles")
    if np.any(np.diff(q) < 0):
        raise DegenerateQuantiles("quantiles must be nondecreasing; rearrange first")
    if not q[-1] > q[0]:
        raise DegenerateQuantiles("quantiles have zero spread")
    return q


def initial_params(q: np.ndarray, taus: Sequence[float] = DEFAULT_TAUS) -> SkewTParams:
    """Median, IQR/1.349, sign of the quantile skew and nu = 5."""
    q = np.asarray(q, dtype=float)
    i05, i25, i50, i75, i95 = (int(np.argmin(np.abs(np.asarray(taus) - t))) for t in DEFAULT_TAUS)
    omega = (q[i75] - q[i25]) / 1.349
    if omega <= 0:
        omega = (q[i95] - q[i05]) / 3.29
    skew = (q[i95] - q[i50]) - (q[i50] - q[i05])
    return SkewTParams(float(q[i50]), float(omega), float(np.sign(skew)), 5.0)


def nelder_mead_batch(fun, x0: np.ndarray, step: float = 0.5, xatol: float = 1e-6,
                      fatol: float = 1e-15, max_iter: int = 400):
    """Nelder-Mead run in lockstep on many independent problems.

    ``fun(idx, X)`` evaluates problems ``idx`` at points ``X`` (one row
    each).  Uses the standard coefficients (1, 2, 1/2, 1/2) and the
    termination rule of scipy's implementation, applied per problem.
    Returns the best vertex, its value and the iteration count per problem.
    """
    B, n = x0.shape
    sim = np.repeat(x0[:, None, :], n + 1, axis=1)
    for d in range(n):
        sim[:, d + 1, d] += step
    idx_all = np.arange(B)
    fs = fun(np.repeat(idx_all, n + 1), sim.reshape(-1, n)).reshape(B, n + 1)
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    for _ in range(max_iter):
        a = np.flatnonzero(active)
        if a.size == 0:
            break
        order = np.argsort(fs[a], axis=1, kind="stable")
        S = np.take_along_axis(sim[a], order[:, :, None], axis=1)
        F = np.take_along_axis(fs[a], order, axis=1)
        conv = (np.abs(S[:, 1:] - S[:, :1]).max(axis=(1, 2)) <= xatol) & (np.abs(F[:, 1:] - F[:, :1]).max(axis=1) <= fatol)
        sim[a], fs[a] = S, F
        active[a[conv]] = False
        keep = ~conv
        a, S, F = a[keep], S[keep], F[keep]
        if a.size == 0:
            break
        iters[a] += 1
        xbar = S[:, :-1].mean(axis=1)
        xw, fw, f0, fsw = S[:, -1], F[:, -1], F[:, 0], F[:, -2]
        xr = 2.0 * xbar - xw
        fr = fun(a, xr)
        expand = fr < f0
        reflect = (fr >= f0) & (fr < fsw)
        outside = (fr >= fsw) & (fr < fw)
        inside = fr >= fw
        x2 = np.where(expand[:, None], xbar + 2.0 * (xr - xbar),
                      np.where(outside[:, None], xbar + 0.5 * (xr - xbar), 0.5 * (xbar + xw)))
        need2 = ~reflect
        f2 = np.full(a.size, np.inf)
        if need2.any():
            f2[need2] = fun(a[need2], x2[need2])
        new_x, new_f = xr.copy(), fr.copy()
        use2 = (expand & (f2 < fr)) | (outside & (f2 <= fr)) | (inside & (f2 < fw))
        new_x[use2], new_f[use2] = x2[use2], f2[use2]
        shrink = (outside & ~(f2 <= fr)) | (inside & ~(f2 < fw))
        S[:, -1], F[:, -1] = new_x, new_f
        if shrink.any():
            sh = np.flatnonzero(shrink)
            base = S[sh, :1]
            Ssh = base + 0.5 * (S[sh, 1:] - base)
            # restore the worst vertex before shrinking
            Ssh[:, -1] = base[:, 0] + 0.5 * (xw[sh] - base[:, 0])
            Fsh = fun(np.repeat(a[sh], n), Ssh.reshape(-1, n)).reshape(sh.size, n)
            S[sh, 1:], F[sh, 1:] = Ssh, Fsh
        sim[a], fs[a] = S, F
    best = np.argmin(fs, axis=1)
    return sim[idx_all, best], fs[idx_all, best], iters


def _grid_starts(qs: np.ndarray, Q: np.ndarray, n: int, chunk: int = 2048) -> np.ndarray:
    """The ``n`` best (alpha, log nu) nodes of a coarse table subgrid per row."""
    sub = Q[::4, ::6]
    ln = TABLE_LOGNU[::4]
    th = np.clip(TABLE_THETA[::6], -np.pi / 2 + 1e-3, np.pi / 2 - 1e-3)
    G = sub.reshape(-1, sub.shape[-1])
    Gc = G - G.mean(axis=1, keepdims=True)
    sxx = np.einsum("gk,gk->g", Gc, Gc)
    out = np.empty((qs.shape[0], n, 2))
    for s in range(0, qs.shape[0], chunk):
        qc = qs[s:s + chunk] - qs[s:s + chunk].mean(axis=1, keepdims=True)
        sxy = qc @ Gc.T
        ssr = -np.where(sxy > 0, sxy**2 / sxx, 0.0)
        top = np.argsort(ssr, axis=1, kind="stable")[:, :n]
        i, j = np.unravel_index(top, sub.shape[:2])
        out[s:s + chunk, :, 0] = np.tan(th[j])
        out[s:s + chunk, :, 1] = ln[i]
    return out


def fit_skewt_batch(qhat: np.ndarray, taus: Sequence[float] = DEFAULT_TAUS, n_starts: int = 4) -> list[SkewTFit]:
    """Least-squares skew-t fits for many quantile vectors at once.

    Each row of ``qhat`` must be nondecreasing with positive spread.  The
    search is Nelder-Mead over ``(alpha, log nu)`` with location and scale
    profiled out in closed form, run from ``n_starts`` deterministic
    starting points: the moment-style initializer (median, IQR/1.349, sign
    of the quantile skew, nu = 5) and the best nodes of a coarse grid.  The
    search uses tabulated quantiles; the reported fit is recomputed with
    exactly solved quantiles.
    """
    taus = tuple(float(t) for t in taus)
    Qh = np.atleast_2d(np.asarray(qhat, dtype=float))
    for row in Qh:
        check_quantiles(row, len(taus))
    B, K = Qh.shape
    # standardize each row so that tolerances are scale free
    c = np.median(Qh, axis=1)
    s = Qh[:, -1] - Qh[:, 0]
    qs = (Qh - c[:, None]) / s[:, None]
    interp = table_interp(taus)
    lo, hi = TABLE_LOGNU[0], TABLE_LOGNU[-1]

    inits = [initial_params(q, taus) for q in Qh]
    X0 = np.empty((B, n_starts, 2))
    X0[:, 0, 0] = [p.alpha for p in inits]
    X0[:, 0, 1] = np.log(5.0)
    if n_starts > 1:
        X0[:, 1:] = _grid_starts(qs, quantile_table(taus), n_starts - 1)
    rows = np.repeat(np.arange(B), n_starts)

    def objective(idx, X):
        lnu = X[:, 1]
        pen = np.maximum(lo - lnu, 0.0) ** 2 + np.maximum(lnu - hi, 0.0) ** 2
        Q0 = interp(np.clip(lnu, lo, hi), np.arctan(X[:, 0]))
        val = _profile(qs[rows[idx]], Q0)[2] + pen
        return np.where(np.isfinite(val), val, np.inf)

    flat0 = X0.reshape(-1, 2)
    start_obj = objective(np.arange(B * n_starts), flat0).reshape(B, n_starts)
    xbest, fbest, _ = nelder_mead_batch(objective, flat0)
    fbest = fbest.reshape(B, n_starts)
    if not np.all(np.isfinite(fbest.min(axis=1))):
        raise OptimizerFailure("skew-t search produced no finite objective")
    pick = np.argmin(fbest, axis=1)
    xb = xbest.reshape(B, n_starts, 2)[np.arange(B), pick]
    alpha = xb[:, 0]
    lnu = np.clip(xb[:, 1], lo, hi)

    # exact quantiles at the optimum, and at the initializer when it is a
    # close competitor
    z0 = interp(lnu, np.arctan(alpha))
    Z = _std_quantiles(np.tile(taus, B), np.repeat(alpha, K), np.repeat(np.exp(lnu), K), z0.ravel()).reshape(B, K)
    xi, om, ssr = _profile(qs, Z)
    close = np.flatnonzero(start_obj[:, 0] <= fbest.min(axis=1) + 1e-8)
    if close.size:
        a0, n0 = X0[close, 0, 0], np.full(close.size, 5.0)
        Z0 = _std_quantiles(np.tile(taus, close.size), np.repeat(a0, K), np.repeat(n0, K)).reshape(-1, K)
        xi0, om0, ssr0 = _profile(qs[close], Z0)
        better = ssr0 < ssr[close]
        sel = close[better]
        alpha[sel], lnu[sel] = a0[better], np.log(5.0)
        xi[sel], om[sel], ssr[sel], Z[sel] = xi0[better], om0[better], ssr0[better], Z0[better]

    fits = []
    for b in range(B):
        p = SkewTParams(float(c[b] + s[b] * xi[b]), float(s[b] * om[b]), float(alpha[b]), float(np.exp(lnu[b])))
        fits.append(SkewTFit(p, float(ssr[b] * s[b] ** 2), p.xi + p.omega * Z[b],
                             tuple(float(v) * s[b] ** 2 for v in start_obj[b])))
    return fits


def fit_skewt(qhat, taus: Sequence[float] = DEFAULT_TAUS, n_starts: int = 4) -> SkewTFit:
    """Least-squares skew-t fit to one nondecreasing quantile vector."""
    q = check_quantiles(qhat, len(taus))
    return fit_skewt_batch(q[None, :], taus, n_starts)[0]


def risk(p: SkewTParams, pi_iar: float = 3.0, pi_dar: float = 0.0) -> RiskMeasures:
    """Upper-tail probability above ``pi_iar`` and lower-tail below ``pi_dar``."""
    iar = 1.0 - skewt_cdf(p, pi_iar)
    dar = skewt_cdf(p, pi_dar)
    return RiskMeasures(float(iar), float(dar), float(pi_iar), float(pi_dar))
