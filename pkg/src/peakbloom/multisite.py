"""Cross-site anomaly detection from posterior bloom curves.

Pipeline, applied to every stored posterior draw: build each site's curve,
assemble the between-site covariance of bloom dates under the comonotone
coupling, project sites onto the top two principal components, fit a robust
center/scatter with FastMCD, and record each site's Mahalanobis distance.
Sites are ranked by the distance at the draw maximizing the log posterior,
with inner-50% intervals across draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .basis import MonotoneBasis, basis_matrix
from .errors import (
    ConfigurationError,
    DegenerateConfigurationError,
    HorizonError,
    PeakBloomError,
)
from .estimators import BloomCurve, link_inverse, transform_coefficients
from .posterior import PosteriorDraws, map_draw

__all__ = [
    "CovarianceEstimate",
    "AnomalyConfig",
    "AnomalyReport",
    "MCDResult",
    "variance_of",
    "covariance_of",
    "covariance_matrix",
    "principal_components",
    "site_scores",
    "fast_mcd",
    "mahalanobis",
    "anomaly_scores",
    "default_flag_threshold",
]


def default_flag_threshold(n_components: int = 2, quantile: float = 0.975) -> float:
    """Distance cutoff: sqrt of the chi-square quantile for the score dim."""
    return float(np.sqrt(stats.chi2.ppf(quantile, df=n_components)))


# ---------------------------------------------------------------------------
# Moments of integer-valued bloom days from a CDF on the grid
# ---------------------------------------------------------------------------

def _survival_grid(curve: BloomCurve, horizon: int) -> np.ndarray:
    """1 - F(t) for t = 0..horizon, using F(0) = 0 by convention."""
    if curve.days[0] > 1 or curve.days[-1] < horizon:
        raise ConfigurationError(f"curve must cover days 1..{horizon}")
    if np.any(np.diff(curve.days) != 1):
        raise ConfigurationError("curve must be on a contiguous integer grid")
    stop = int(np.searchsorted(curve.days, horizon)) + 1
    f = np.concatenate([[0.0], curve.values[:stop]])
    if f[-1] < 1.0 - 1e-6:
        raise HorizonError(
            f"F({horizon}) = {f[-1]:.8f} < 1; bloom-by-horizon assumption violated")
    return 1.0 - f


def variance_of(curve: BloomCurve, horizon: int = 180, formula: str = "corrected") -> float:
    """Variance of the bloom day implied by the curve.

    ``corrected`` computes sum((2t+1)(1-F(t))) - (sum(1-F(t)))^2, the exact
    variance of an integer-valued day; ``paper`` drops the +1 term, which
    understates the second moment by E[T] (a point mass at day d yields -d).
    """
    if formula not in ("corrected", "paper"):
        raise ConfigurationError(f"unknown variance formula {formula!r}")
    s = _survival_grid(curve, horizon)
    t = np.arange(s.size, dtype=float)
    first = float(np.sum(s))
    factor = 2.0 * t + 1.0 if formula == "corrected" else 2.0 * t
    return float(np.sum(factor * s) - first**2)


def covariance_of(curve_j: BloomCurve, curve_k: BloomCurve, horizon: int = 180) -> float:
    """Comonotone covariance: sum over (t1, t2) of min(Fj, Fk) - Fj*Fk.

    Computed exactly via the layer identity min(a, b) = integral of
    1{u<a}1{u<b} du, which reduces the double sum to a piecewise-constant
    integral over the merged breakpoints of the two (sorted) curves.
    """
    fj = 1.0 - _survival_grid(curve_j, horizon)
    fk = 1.0 - _survival_grid(curve_k, horizon)
    # min-sum via prefix sums against the sorted opposite margin
    idx = np.searchsorted(fk, fj, side="right")
    prefix = np.concatenate([[0.0], np.cumsum(fk)])
    min_sum = float(np.sum(prefix[idx] + fj * (fk.size - idx)))
    return min_sum - float(fj.sum()) * float(fk.sum())


@dataclass(frozen=True)
class CovarianceEstimate:
    matrix: np.ndarray
    horizon: int
    diagonal_formula: str
    sites: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ConfigurationError("covariance matrix must be square")
        if not np.allclose(m, m.T, atol=1e-8):
            raise ConfigurationError("covariance matrix must be symmetric")
        object.__setattr__(self, "matrix", m)


def covariance_matrix(curves, horizon: int = 180,
                      diagonal_formula: str = "corrected",
                      sites=()) -> CovarianceEstimate:
    """Comonotone covariance for all site pairs; diagonal per the formula."""
    surv = np.stack([_survival_grid(c, horizon) for c in curves])
    return CovarianceEstimate(
        matrix=_covariance_from_survival(surv, diagonal_formula),
        horizon=horizon,
        diagonal_formula=diagonal_formula,
        sites=tuple(sites),
    )


def _covariance_from_survival(surv: np.ndarray, diagonal_formula: str) -> np.ndarray:
    """Vectorized comonotone covariance from a (J, horizon+1) survival stack."""
    if diagonal_formula not in ("corrected", "paper"):
        raise ConfigurationError(f"unknown variance formula {diagonal_formula!r}")
    f = 1.0 - surv  # rows are sorted nondecreasing
    J = f.shape[0]
    # piecewise-constant layer counts c_j(u) = #{t: F_j(t) > u} on the
    # merged breakpoint grid of all sites
    breaks = np.unique(np.concatenate([f.ravel(), [0.0, 1.0]]))
    widths = np.diff(breaks)
    left = breaks[:-1]
    counts = np.empty((J, left.size))
    for j in range(J):
        counts[j] = f.shape[1] - np.searchsorted(f[j], left, side="right")
    weighted = counts * widths[None, :]
    min_sums = weighted @ counts.T
    g = f.sum(axis=1)
    cov = min_sums - np.outer(g, g)
    t = np.arange(f.shape[1], dtype=float)
    factor = 2.0 * t + 1.0 if diagonal_formula == "corrected" else 2.0 * t
    np.fill_diagonal(cov, surv @ factor - surv.sum(axis=1) ** 2)
    return 0.5 * (cov + cov.T)


# ---------------------------------------------------------------------------
# Principal components and site scores
# ---------------------------------------------------------------------------

def principal_components(cov: CovarianceEstimate, k: int = 2):
    """Top-k eigenpairs of the covariance, eigenvalues descending.

    Eigenvector signs are fixed so the largest-magnitude loading is
    positive, keeping repeated runs byte-identical.
    """
    m = cov.matrix
    if k > m.shape[0]:
        raise ConfigurationError(f"k={k} exceeds the number of sites {m.shape[0]}")
    try:
        eigvals, eigvecs = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise PeakBloomError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1][:k]
    vals = eigvals[order]
    vecs = eigvecs[:, order]
    for i in range(vecs.shape[1]):
        pivot = int(np.argmax(np.abs(vecs[:, i])))
        if vecs[pivot, i] < 0:
            vecs[:, i] = -vecs[:, i]
    return vals, vecs


def site_scores(cov: CovarianceEstimate, k: int = 2) -> np.ndarray:
    """Per-site coordinates: eigenvector loadings scaled by sqrt(eigenvalue).

    The covariance treats sites as variables, so a site's coordinate on
    component i is sqrt(lambda_i) * v_i[site]; negatives from numerical
    noise are clamped to zero before the square root.
    """
    vals, vecs = principal_components(cov, k)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]


# ---------------------------------------------------------------------------
# FastMCD robust location/scatter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MCDResult:
    center: np.ndarray
    scatter: np.ndarray
    support: np.ndarray
    determinant: float
    consistency: float
    c_step_determinants: tuple = ()


def _subset_stats(points: np.ndarray, idx: np.ndarray):
    sub = points[idx]
    center = sub.mean(axis=0)
    diff = sub - center
    cov = diff.T @ diff / (len(idx) - 1)
    return center, cov


def _c_step(points: np.ndarray, center, cov, h: int) -> np.ndarray:
    d2 = _maha_sq(points, center, cov)
    return np.sort(np.argsort(d2, kind="stable")[:h])


def _maha_sq(points: np.ndarray, center, cov) -> np.ndarray:
    diff = points - center
    sol = np.linalg.solve(cov, diff.T)
    return np.einsum("ij,ji->i", diff, sol)


def fast_mcd(points, h: Optional[int] = None, n_starts: int = 500, seed: int = 0, *,
             n_keep: int = 10, max_csteps: int = 100,
             record_trace: bool = False) -> MCDResult:
    """Approximate minimum-covariance-determinant estimate in the plane.

    Concentration algorithm: many random (d+1)-point starts, two C-steps
    each, then full C-step convergence of the best few subsets. The scatter
    of the winning h-subset is rescaled by the usual consistency factor for
    Gaussian data. Each C-step provably never increases the determinant;
    pass ``record_trace`` to capture the per-step determinants.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ConfigurationError("points must be a 2-d array")
    J, d = pts.shape
    if J < 4:
        raise ConfigurationError("FastMCD needs at least 4 points")
    h_default = (J + d + 1) // 2
    if h is None:
        h = h_default
    if not h_default <= h <= J:
        raise ConfigurationError(f"h must be in [{h_default}, {J}], got {h}")
    if np.allclose(pts, pts[0], atol=1e-12):
        raise DegenerateConfigurationError("all points identical; scatter undefined")
    rng = np.random.default_rng(seed)
    trace = []

    def concentrate(idx, steps):
        dets = []
        for _ in range(steps):
            center, cov = _subset_stats(pts, idx)
            det = float(np.linalg.det(cov))
            if det < 1e-12 or not np.isfinite(det):
                return idx, center, cov, det, dets
            dets.append(det)
            new_idx = _c_step(pts, center, cov, h)
            if np.array_equal(new_idx, idx):
                break
            idx = new_idx
        center, cov = _subset_stats(pts, idx)
        det = float(np.linalg.det(cov))
        dets.append(det)
        return idx, center, cov, det, dets

    candidates = []
    for _ in range(n_starts):
        start = rng.choice(J, size=d + 1, replace=False)
        center, cov = _subset_stats(pts, start)
        # grow a singular seed subset until the scatter is invertible
        while float(np.abs(np.linalg.det(cov))) < 1e-12 and len(start) < J:
            extra = rng.integers(J)
            if extra in start:
                continue
            start = np.append(start, extra)
            center, cov = _subset_stats(pts, start)
        if float(np.abs(np.linalg.det(cov))) < 1e-12:
            continue
        idx = _c_step(pts, center, cov, h)
        idx, center, cov, det, dets = concentrate(idx, steps=2)
        if record_trace:
            trace.extend(dets)
        candidates.append((det, tuple(idx)))
    if not candidates:
        raise DegenerateConfigurationError("no nonsingular starting subset found")

    candidates.sort(key=lambda c: (c[0], c[1]))
    best = None
    seen = set()
    for det, idx in candidates[:n_keep]:
        if idx in seen:
            continue
        seen.add(idx)
        idx, center, cov, det, dets = concentrate(np.array(idx), steps=max_csteps)
        if record_trace:
            trace.extend(dets)
        if best is None or det < best[0]:
            best = (det, idx, center, cov)
    det, idx, center, cov = best
    if det < 1e-12:
        raise DegenerateConfigurationError(
            f"minimum-determinant subset is (near-)singular: det={det:.3e}")
    alpha = h / J
    consistency = alpha / stats.chi2.cdf(stats.chi2.ppf(alpha, d), d + 2)
    return MCDResult(
        center=center,
        scatter=cov * consistency,
        support=np.asarray(idx, dtype=int),
        determinant=det,
        consistency=float(consistency),
        c_step_determinants=tuple(trace),
    )


def mahalanobis(points, center, scatter) -> np.ndarray:
    """sqrt((x - mu)' S^-1 (x - mu)) for each row of points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return np.sqrt(np.maximum(_maha_sq(pts, np.asarray(center, float),
                                       np.asarray(scatter, float)), 0.0))


# ---------------------------------------------------------------------------
# End-to-end anomaly scoring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnomalyConfig:
    horizon: int = 180
    diagonal_formula: str = "corrected"
    n_components: int = 2
    mcd_h: Optional[int] = None
    mcd_starts: int = 500
    seed: int = 0
    flag_threshold: Optional[float] = None

    def threshold(self) -> float:
        if self.flag_threshold is not None:
            return float(self.flag_threshold)
        return default_flag_threshold(self.n_components)


@dataclass
class AnomalyReport:
    """Per-site robust distances with posterior intervals and flags.

    The MAP distance need not sit inside [lower50, upper50]; only
    lower50 <= upper50 is guaranteed.
    """

    sites: tuple
    map_distance: np.ndarray
    lower50: np.ndarray
    upper50: np.ndarray
    ranking: tuple
    flagged: tuple
    threshold: float
    diagonal_formula: str
    n_draws_used: int
    n_draws_dropped: int
    map_chain: int
    map_iteration: int
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "threshold": self.threshold,
            "diagonal_formula": self.diagonal_formula,
            "n_draws_used": self.n_draws_used,
            "n_draws_dropped": self.n_draws_dropped,
            "map_chain": self.map_chain,
            "map_iteration": self.map_iteration,
            "ranking": list(self.ranking),
            "flagged": list(self.flagged),
            "sites": {
                site: {
                    "map_distance": float(self.map_distance[j]),
                    "lower50": float(self.lower50[j]),
                    "upper50": float(self.upper50[j]),
                    "flagged": site in self.flagged,
                }
                for j, site in enumerate(self.sites)
            },
            "notes": list(self.notes),
        }


def curves_from_coefficients(beta_matrix: np.ndarray, basis: MonotoneBasis,
                             horizon: int = 180, link: str = "logit",
                             force_horizon: bool = True) -> np.ndarray:
    """Stack of F values (J, horizon) on days 1..horizon from (J, q) betas.

    With ``force_horizon`` the final value is set to 1, imposing the
    everything-bloomed-by-the-horizon assumption the moment formulas need;
    the leftover mass lands on the last day.
    """
    days = np.arange(1, horizon + 1, dtype=float)
    design = basis_matrix(basis, days) @ basis.shape
    btilde = transform_coefficients(beta_matrix)
    eta = btilde @ design.T
    values = link_inverse(eta, link)
    values = np.maximum.accumulate(values, axis=1)
    if force_horizon:
        values[:, -1] = 1.0
    return values


def anomaly_scores(draws: PosteriorDraws, basis: MonotoneBasis,
                   config: AnomalyConfig = AnomalyConfig()) -> AnomalyReport:
    """Robust per-site anomaly distances across all stored posterior draws."""
    J = len(draws.sites)
    if J < 4:
        raise ConfigurationError("anomaly scoring needs at least 4 sites")
    chains, kept = draws.log_posterior.shape
    horizon = config.horizon
    days = np.arange(1, horizon + 1, dtype=float)
    design = basis_matrix(basis, days) @ basis.shape
    t_grid = np.arange(horizon + 1, dtype=float)
    diag_factor = 2.0 * t_grid + 1.0 if config.diagonal_formula == "corrected" else 2.0 * t_grid

    mp = map_draw(draws)
    map_flat = mp.chain * kept + mp.iteration

    distances = np.full((chains * kept, J), np.nan)
    dropped = 0
    notes = []
    mcd_seeds = np.random.SeedSequence(config.seed).spawn(chains * kept)
    for flat in range(chains * kept):
        ch, it = divmod(flat, kept)
        beta = draws.draws[ch, it]
        btilde = transform_coefficients(beta)
        values = link_inverse(btilde @ design.T, draws.link)
        values = np.maximum.accumulate(values, axis=1)
        values[:, -1] = 1.0
        surv = np.concatenate([np.ones((J, 1)), 1.0 - values], axis=1)
        f = 1.0 - surv
        breaks = np.unique(np.concatenate([f.ravel(), [0.0, 1.0]]))
        widths = np.diff(breaks)
        left = breaks[:-1]
        counts = np.empty((J, left.size))
        for j in range(J):
            counts[j] = f.shape[1] - np.searchsorted(f[j], left, side="right")
        cov = (counts * widths[None, :]) @ counts.T - np.outer(f.sum(axis=1), f.sum(axis=1))
        np.fill_diagonal(cov, surv @ diag_factor - surv.sum(axis=1) ** 2)
        cov = 0.5 * (cov + cov.T)
        est = CovarianceEstimate(matrix=cov, horizon=horizon,
                                 diagonal_formula=config.diagonal_formula,
                                 sites=draws.sites)
        try:
            scores = site_scores(est, config.n_components)
            mcd = fast_mcd(scores, h=config.mcd_h, n_starts=config.mcd_starts,
                           seed=mcd_seeds[flat])
            distances[flat] = mahalanobis(scores, mcd.center, mcd.scatter)
        except PeakBloomError as exc:
            dropped += 1
            if dropped <= 3:
                notes.append(f"draw (chain={ch}, iter={it}) dropped: {exc}")
    ok = ~np.isnan(distances[:, 0])
    if not ok.any():
        raise DegenerateConfigurationError("every posterior draw failed the anomaly pipeline")
    if not ok[map_flat]:
        # fall back to the best-scoring draw that survived the pipeline
        order = np.argsort(draws.log_posterior.ravel())[::-1]
        map_flat = int(next(i for i in order if ok[i]))
        notes.append("MAP draw failed the pipeline; using the next-best draw")
        ch, it = divmod(map_flat, kept)
    else:
        ch, it = mp.chain, mp.iteration

    map_dist = distances[map_flat]
    lower50 = np.nanpercentile(distances[ok], 25.0, axis=0)
    upper50 = np.nanpercentile(distances[ok], 75.0, axis=0)
    order = np.argsort(-map_dist, kind="stable")
    ranking = tuple(draws.sites[j] for j in order)
    threshold = config.threshold()
    flagged = tuple(s for j, s in enumerate(draws.sites) if map_dist[j] > threshold)
    return AnomalyReport(
        sites=draws.sites,
        map_distance=map_dist,
        lower50=lower50,
        upper50=upper50,
        ranking=ranking,
        flagged=flagged,
        threshold=threshold,
        diagonal_formula=config.diagonal_formula,
        n_draws_used=int(ok.sum()),
        n_draws_dropped=dropped,
        map_chain=int(ch),
        map_iteration=int(it),
        notes=notes,
    )
