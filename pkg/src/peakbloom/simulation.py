"""Monte Carlo studies of monitoring bias.

Generates status reports from a known bloom distribution, runs the three
estimators on each replication, and aggregates signed bias and RMSE per
estimator. The published benchmark tables report bias magnitudes; callers
comparing against them should take ``abs(bias)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import special

from .basis import MonotoneBasis, build_basis
from .errors import ConfigurationError, CurveDomainError, FitError, PeakBloomError, SeparationError
from .estimators import (
    DEFAULT_LAMBDA_GRID,
    BloomCurve,
    VisitSeries,
    fit_probit,
    fit_spline_auto,
    median_of,
    naive_estimate,
    probit_curve,
    spline_curve,
)

__all__ = [
    "TruthSpec",
    "SimResult",
    "truth_cdf",
    "truth_curve",
    "simulate_visits",
    "simulate_sites",
    "run_study",
    "ESTIMATORS",
]

ESTIMATORS = ("naive", "probit", "spline")

_STUDY_HORIZON = 180


@dataclass(frozen=True)
class TruthSpec:
    """A known bloom distribution used to generate monitoring data."""

    kind: str  # "normal" | "uniform-mixture" | "tabulated"
    mean: float = 90.0
    sd: float = 40.0
    grid_days: tuple = ()
    grid_values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("normal", "uniform-mixture", "tabulated"):
            raise ConfigurationError(f"unknown truth kind {self.kind!r}")
        if self.kind == "normal" and self.sd <= 0:
            raise ConfigurationError("normal truth needs sd > 0")
        if self.kind == "tabulated":
            d = np.asarray(self.grid_days, dtype=float)
            v = np.asarray(self.grid_values, dtype=float)
            if d.size == 0 or d.shape != v.shape:
                raise ConfigurationError("tabulated truth needs matching nonempty grids")
            if np.any(np.diff(d) <= 0) or np.any(np.diff(v) < 0):
                raise ConfigurationError("tabulated truth must be a nondecreasing step CDF")
            if v.min() < 0 or v.max() > 1:
                raise ConfigurationError("tabulated truth values must lie in [0, 1]")

    @staticmethod
    def normal(mean: float = 90.0, sd: float = 40.0) -> "TruthSpec":
        return TruthSpec(kind="normal", mean=mean, sd=sd)

    @staticmethod
    def mixture() -> "TruthSpec":
        return TruthSpec(kind="uniform-mixture")

    @staticmethod
    def tabulated(days, values) -> "TruthSpec":
        return TruthSpec(kind="tabulated", grid_days=tuple(days), grid_values=tuple(values))

    @staticmethod
    def point_mass(day: int) -> "TruthSpec":
        return TruthSpec.tabulated((0, day), (0.0, 1.0))


def _mixture_cdf(t: np.ndarray) -> np.ndarray:
    """Three-component uniform mixture: plateaus at 1/20 and 2/3."""
    out = np.empty_like(t)
    out[t <= 0.0] = 0.0
    m = (t > 0.0) & (t <= 37.5)
    out[m] = 1.0 / 20.0
    m = (t > 37.5) & (t <= 74.5)
    out[m] = 3.0 * (t[m] - 34.5) / 180.0
    m = (t > 74.5) & (t <= 150.0)
    out[m] = 2.0 / 3.0
    m = (t > 150.0) & (t <= 180.0)
    out[m] = 2.0 * (t[m] - 90.0) / 180.0
    out[t > 180.0] = 1.0
    return out


def truth_cdf(spec: TruthSpec, t):
    """F(t) for the truth; valid for 0 <= t <= 181."""
    arr = np.atleast_1d(np.asarray(t, dtype=float))
    if arr.size and (arr.min() < 0.0 or arr.max() > 181.0):
        raise CurveDomainError("truth CDF is defined for 0 <= t <= 181")
    if spec.kind == "normal":
        out = special.ndtr((arr - spec.mean) / spec.sd)
    elif spec.kind == "uniform-mixture":
        out = _mixture_cdf(arr)
    else:
        days = np.asarray(spec.grid_days, dtype=float)
        values = np.asarray(spec.grid_values, dtype=float)
        idx = np.searchsorted(days, arr, side="right") - 1
        out = np.where(idx >= 0, values[np.clip(idx, 0, None)], 0.0)
    return float(out[0]) if np.ndim(t) == 0 else out


def truth_curve(spec: TruthSpec, horizon: int = _STUDY_HORIZON) -> BloomCurve:
    days = np.arange(1, horizon + 1)
    return BloomCurve(days=days, values=truth_cdf(spec, days), source="truth")


def simulate_visits(spec: TruthSpec, n: int, seed) -> VisitSeries:
    """n distinct visit days from 1..180 with Bernoulli(F(day)) reports."""
    if not 1 <= n <= _STUDY_HORIZON:
        raise ConfigurationError(f"n must be in 1..{_STUDY_HORIZON}, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    days = np.sort(rng.choice(np.arange(1, _STUDY_HORIZON + 1), size=n, replace=False))
    reports = (rng.random(n) < truth_cdf(spec, days)).astype(int)
    return VisitSeries(days=days, reports=reports)


def simulate_sites(specs: dict, n_visits: int, seed) -> dict:
    """One VisitSeries per site, with independent per-site substreams."""
    root = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    children = root.spawn(len(specs))
    return {
        site: simulate_visits(spec, n_visits, np.random.default_rng(child))
        for (site, spec), child in zip(sorted(specs.items()), children)
    }


@dataclass(frozen=True)
class SimResult:
    """Aggregated performance of one estimator at one design point."""

    estimator: str
    n_visits: int
    replications: int
    bias: float
    rmse: float
    failures: int
    estimates: Optional[tuple] = None

    def __post_init__(self):
        if self.failures > self.replications:
            raise ConfigurationError("failures cannot exceed replications")


def _estimate_once(spec: TruthSpec, n_visits: int, rng, basis: MonotoneBasis,
                   ridge_fallback: float, spline_link: str, lambda_grid) -> dict:
    series = simulate_visits(spec, n_visits, rng)
    out = {}
    out["naive"] = naive_estimate(series)
    try:
        try:
            pfit = fit_probit(series, ridge=0.0)
        except SeparationError:
            pfit = fit_probit(series, ridge=ridge_fallback)
        out["probit"] = median_of(probit_curve(pfit))
    except PeakBloomError:
        out["probit"] = None
    try:
        sfit = fit_spline_auto(series, basis, lambda_grid=lambda_grid, link=spline_link)
        curve = spline_curve(basis, sfit.beta, link=spline_link)
        out["spline"] = median_of(curve)
    except PeakBloomError:
        out["spline"] = None
    return out


def run_study(spec: TruthSpec, n_visits: int, replications: int, seed: int, *,
              basis: Optional[MonotoneBasis] = None,
              lambda_grid=DEFAULT_LAMBDA_GRID,
              ridge_fallback: float = 1e-4,
              spline_link: str = "probit",
              jobs: int = 1,
              keep_estimates: bool = False) -> list[SimResult]:
    """Replicate the monitoring experiment and score each estimator.

    bias = mean(tau_hat - tau) and rmse = sqrt(mean((tau_hat - tau)^2)) over
    the replications where the estimator produced a value; replications with
    no value (all-zero reports, failed or degenerate fits) count as failures
    instead of raising. The true tau uses the same integer-grid median
    convention as the estimators, so conventions cancel in the bias.
    """
    if replications < 1:
        raise ConfigurationError("need at least one replication")
    if basis is None:
        basis = build_basis(0.0, float(_STUDY_HORIZON), q=8, degree=3)
    tau = median_of(truth_curve(spec))
    if tau is None:
        raise ConfigurationError("truth never crosses 0.5; study undefined")
    children = np.random.SeedSequence(seed).spawn(replications)

    def one(child):
        rng = np.random.default_rng(child)
        return _estimate_once(spec, n_visits, rng, basis, ridge_fallback,
                              spline_link, lambda_grid)

    if jobs != 1:
        from joblib import Parallel, delayed

        estimates = Parallel(n_jobs=jobs, batch_size=32)(
            delayed(one)(child) for child in children)
    else:
        estimates = [one(child) for child in children]

    results = []
    for name in ESTIMATORS:
        values = np.array([e[name] for e in estimates if e[name] is not None], dtype=float)
        failures = replications - values.size
        if values.size:
            err = values - tau
            bias = float(err.mean())
            rmse = float(np.sqrt(np.mean(err**2)))
        else:
            bias = rmse = float("nan")
        results.append(SimResult(
            estimator=name,
            n_visits=n_visits,
            replications=replications,
            bias=bias,
            rmse=rmse,
            failures=failures,
            estimates=tuple(e[name] for e in estimates) if keep_estimates else None,
        ))
    return results
