"""Multi-level dynamic factor model with overlapping region and income blocks.

Factors are extracted from the z-scored panel.  The global factor loads on
every series, each regional factor on the series of its region and each
income factor on the series of its income group, so every series loads on
exactly three factors.  Estimation is a sequential least-squares sweep
(factors block by block given loadings, then restricted loadings given
factors) with the identification constraints re-imposed after every sweep:
unit Euclidean norm, block factors orthogonal to the global factor, regional
factors orthogonal to income factors, and a positive sum of loadings.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import RankDeficiency
from .ingest import INCOMES, REGIONS, CountryMeta, InflationPanel

log = logging.getLogger(__name__)

FACTOR_NAMES = ("F_g", "F_Af", "F_Am", "F_As", "F_Eu", "F_Ad", "F_Mi", "F_Li")
LEVELS = ("global",) + ("region",) * 4 + ("income",) * 3


@dataclass(frozen=True, eq=False)
class BlockStructure:
    codes: tuple[str, ...]
    mask: np.ndarray  # (N, K) bool
    names: tuple[str, ...] = FACTOR_NAMES
    levels: tuple[str, ...] = LEVELS
    # code -> (region index 1..4, income index 1..3); empty for custom layouts
    block_of: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != (len(self.codes), len(self.names)):
            raise ValueError("mask shape does not match codes x factors")
        if len(self.levels) != len(self.names):
            raise ValueError("one level label per factor required")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def K(self) -> int:
        return len(self.names)

    def columns(self, level: str) -> list[int]:
        return [k for k, lv in enumerate(self.levels) if lv == level]

    def allowed(self, i: int) -> list[str]:
        return [self.names[k] for k in np.flatnonzero(self.mask[i])]


def build_block_structure(meta: Sequence[CountryMeta]) -> BlockStructure:
    mask = np.zeros((len(meta), 8), dtype=bool)
    block_of = {}
    for i, m in enumerate(meta):
        r = REGIONS.index(m.region)
        c = INCOMES.index(m.income)
        mask[i, [0, 1 + r, 5 + c]] = True
        block_of[m.code] = (r + 1, c + 1)
    return BlockStructure(tuple(m.code for m in meta), mask, block_of=block_of)


def standardize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(values, dtype=float)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    if np.any(sd == 0):
        raise RankDeficiency("constant series cannot be standardized")
    return (x - mu) / sd, mu, sd


# ---------------------------------------------------------------------------
# scree and principal components


@dataclass(frozen=True)
class ScreeReport:
    shares: np.ndarray
    count_above: int
    threshold: float = 0.05


def scree(panel: InflationPanel | np.ndarray, subset=None, threshold: float = 0.05) -> ScreeReport:
    """Eigenvalue shares of the correlation matrix of the selected series.

    ``subset`` may be a boolean mask, a list of column indices, or a
    predicate on :class:`CountryMeta`.
    """
    if isinstance(panel, InflationPanel):
        values = panel.values
        if callable(subset):
            subset = [j for j, m in enumerate(panel.meta) if subset(m)]
    else:
        values = np.asarray(panel, dtype=float)
    if subset is not None:
        values = values[:, subset]
    if values.shape[1] == 0:
        raise ValueError("empty subset")
    z, _, _ = standardize(values)
    corr = z.T @ z / z.shape[0]
    ev = np.clip(np.linalg.eigvalsh(corr)[::-1], 0.0, None)
    shares = ev / ev.sum()
    return ScreeReport(shares, int((shares > threshold).sum()), threshold)


@dataclass(frozen=True, eq=False)
class FactorSet:
    factors: np.ndarray  # (T, K), unit Euclidean norm columns
    loadings: np.ndarray  # (N, K), zero off the mask
    residuals: np.ndarray  # (T, N)
    mean: np.ndarray
    sd: np.ndarray
    names: tuple[str, ...]
    mask: np.ndarray
    levels: tuple[str, ...] = ()
    converged: bool = True
    n_iter: int = 0
    objective_path: tuple[float, ...] = ()
    bands: dict | None = None

    @property
    def T(self) -> int:
        return self.factors.shape[0]

    def scaled(self) -> np.ndarray:
        """Factors rescaled to unit variance (``sqrt(T)`` times unit norm)."""
        return self.factors * np.sqrt(self.T)

    def column(self, name: str) -> np.ndarray:
        return self.factors[:, self.names.index(name)]


def extract_pc(panel: InflationPanel | np.ndarray, r: int) -> FactorSet:
    """First ``r`` principal components of the z-scored panel."""
    values = panel.values if isinstance(panel, InflationPanel) else np.asarray(panel, float)
    T, N = values.shape
    if not 1 <= r <= min(T, N):
        raise ValueError(f"r must lie in [1, {min(T, N)}]")
    z, mu, sd = standardize(values)
    U, s, Vt = np.linalg.svd(z, full_matrices=False)
    F = U[:, :r]
    L = z.T @ F
    sign = np.where(L.sum(axis=0) >= 0, 1.0, -1.0)
    F, L = F * sign, L * sign
    names = tuple(f"PC{j + 1}" for j in range(r))
    return FactorSet(F, L, z - F @ L.T, mu, sd, names, np.ones((N, r), bool),
                     ("global",) * r)


# ---------------------------------------------------------------------------
# multi-level estimation


@dataclass(frozen=True)
class MLDFMConfig:
    tol: float = 1e-6
    max_iter: int = 1000
    init: str = "cca"  # or "pc"
    cca_clip: float = 0.99


def _first_pc(z: np.ndarray) -> np.ndarray:
    U, _, _ = np.linalg.svd(z, full_matrices=False)
    f = U[:, 0]
    return f if (z.T @ f).sum() >= 0 else -f


def _orth(A: np.ndarray) -> np.ndarray:
    Q, _ = np.linalg.qr(A)
    return Q


def _cca_align(R: np.ndarray, I: np.ndarray, clip: float) -> tuple[np.ndarray, np.ndarray]:
    """Rotate two factor sets so that their spans become orthogonal.

    Canonical variate pairs are decorrelated symmetrically, i.e. each pair
    [a, b] is replaced by [a, b] S^{-1/2} with S its 2x2 correlation matrix,
    which moves both members by the same amount.
    """
    if R.shape[1] == 0 or I.shape[1] == 0:
        return R, I
    Qr, Qi = _orth(R), _orth(I)
    U, s, Vt = np.linalg.svd(Qr.T @ Qi)
    a = Qr @ U
    b = Qi @ Vt.T
    m = s.size
    rho = np.clip(s, -clip, clip)
    p = 1.0 / np.sqrt(1.0 + rho)
    q = 1.0 / np.sqrt(1.0 - rho)
    diag, off = 0.5 * (p + q), 0.5 * (p - q)
    a2, b2 = a.copy(), b.copy()
    a2[:, :m] = a[:, :m] * diag + b[:, :m] * off
    b2[:, :m] = b[:, :m] * diag + a[:, :m] * off
    R_new = a2 @ (U.T @ (Qr.T @ R))
    I_new = b2 @ (Vt @ (Qi.T @ I))
    return R_new, I_new


def _loadings(z: np.ndarray, F: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-series OLS restricted to the mask, grouped by identical mask rows."""
    N, K = mask.shape
    L = np.zeros((N, K))
    rows, inverse = np.unique(mask, axis=0, return_inverse=True)
    for g, row in enumerate(rows):
        cols = np.flatnonzero(row)
        series = np.flatnonzero(inverse.ravel() == g)
        coef = np.linalg.lstsq(F[:, cols], z[:, series], rcond=None)[0]
        L[np.ix_(series, cols)] = coef.T
    return L


def _identify(F: np.ndarray, levels: Sequence[str]) -> np.ndarray:
    """Unit norms, block factors orthogonal to the global factor, regional
    factors orthogonal to income factors."""
    F = F.copy()
    g = [k for k, lv in enumerate(levels) if lv == "global"]
    reg = [k for k, lv in enumerate(levels) if lv == "region"]
    inc = [k for k, lv in enumerate(levels) if lv == "income"]

    def normalize(cols):
        for k in cols:
            nrm = np.linalg.norm(F[:, k])
            if nrm > 0:
                F[:, k] /= nrm

    normalize(g)
    if g:
        Qg = _orth(F[:, g])
        blocks = reg + inc
        F[:, blocks] -= Qg @ (Qg.T @ F[:, blocks])
    normalize(inc)
    if inc and reg:
        Qi = _orth(F[:, inc])
        F[:, reg] -= Qi @ (Qi.T @ F[:, reg])
    normalize(reg)
    return F


def _fix_signs(F: np.ndarray, L: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sign = np.where(L.sum(axis=0) >= 0, 1.0, -1.0)
    return F * sign, L * sign


def _ssr(z, F, L):
    e = z - F @ L.T
    return float(np.einsum("ij,ij->", e, e))


def _initialize(z, structure: BlockStructure, config: MLDFMConfig) -> np.ndarray:
    T = z.shape[0]
    mask, levels = structure.mask, structure.levels
    F = np.zeros((T, structure.K))
    g = structure.columns("global")
    resid = z.copy()
    for k in g:
        F[:, k] = _first_pc(resid[:, mask[:, k]])
        resid = resid - np.outer(F[:, k], F[:, k] @ resid)
    reg, inc = structure.columns("region"), structure.columns("income")
    for k in reg + inc:
        F[:, k] = _first_pc(resid[:, mask[:, k]])
    if config.init == "cca" and reg and inc:
        F[:, reg], F[:, inc] = _cca_align(F[:, reg], F[:, inc], config.cca_clip)
    return F


def estimate_mldfm(
    panel: InflationPanel | np.ndarray,
    structure: BlockStructure,
    config: MLDFMConfig = MLDFMConfig(),
) -> FactorSet:
    values = panel.values if isinstance(panel, InflationPanel) else np.asarray(panel, float)
    T, N = values.shape
    mask = structure.mask
    if mask.shape[0] != N:
        raise ValueError("structure does not match the panel width")
    if T <= structure.K:
        raise ValueError(f"need more than {structure.K} time periods")
    counts = mask.sum(axis=0)
    for k in np.flatnonzero(counts < 2):
        raise RankDeficiency(f"block {structure.names[k]} has {counts[k]} series; need 2")

    z, mu, sd = standardize(values)
    levels = structure.levels
    order = structure.columns("global") + structure.columns("region") + structure.columns("income")
    members = [np.flatnonzero(mask[:, k]) for k in range(structure.K)]

    F = _identify(_initialize(z, structure, config), levels)
    F, L = _fix_signs(F, _loadings(z, F, mask))
    path = [_ssr(z, F, L)]

    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        L_old = L
        for k in order:
            S = members[k]
            lam = L[S, k]
            denom = lam @ lam
            if denom <= 0:
                continue
            part = z[:, S] - F @ L[S].T + np.outer(F[:, k], lam)
            F[:, k] = part @ lam / denom
        # identification first so that the loadings are always the LS
        # solution for the factors actually reported
        F = _identify(F, levels)
        F, L = _fix_signs(F, _loadings(z, F, mask))
        path.append(_ssr(z, F, L))
        if np.max(np.abs(L - L_old)) < config.tol:
            converged = True
            break

    if not converged:
        log.warning("ML-DFM did not converge in %d sweeps", config.max_iter)
    return FactorSet(
        F, L, z - F @ L.T, mu, sd, structure.names, mask, levels,
        converged, it, tuple(path),
    )


def factor_bands(fs: FactorSet, level: float = 0.95) -> dict[str, np.ndarray]:
    """Pointwise confidence half-widths for each factor.

    Treats idiosyncratic errors as cross-sectionally uncorrelated and
    homoskedastic over time: the variance of the least-squares factor
    estimate at each date is ``sum(l_i^2 s_i^2) / (sum l_i^2)^2`` over the
    series loading on it.  For block factors this is a heuristic.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    zq = stats.norm.ppf(0.5 + level / 2.0)
    s2 = np.mean(fs.residuals**2, axis=0)
    out = {}
    for k, name in enumerate(fs.names):
        S = np.flatnonzero(fs.mask[:, k])
        lam2 = fs.loadings[S, k] ** 2
        denom = lam2.sum()
        var = (lam2 @ s2[S]) / denom**2 if denom > 0 else np.inf
        out[name] = np.full(fs.T, zq * np.sqrt(var))
    return out
