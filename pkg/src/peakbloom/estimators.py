"""Point estimators for the peak bloom date.

Three competing estimators of the day the bloom distribution crosses 1/2:

* naive:  first visit day with a positive report,
* probit: two-parameter probit regression on the visit day,
* spline: penalized monotone-spline fit (MAP of the penalized log posterior).

All fitted curves are exposed as :class:`BloomCurve` objects on the integer
day grid, and the median is always the first grid day with F(t) > 0.5.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .basis import MonotoneBasis, basis_matrix, transform_coefficients
from .errors import ConfigurationError, FitError, SeparationError

__all__ = [
    "VisitSeries",
    "SiteCounts",
    "BloomCurve",
    "PriorSpec",
    "as_counts",
    "naive_estimate",
    "fit_probit",
    "ProbitFit",
    "probit_curve",
    "fit_spline_map",
    "SplineFit",
    "spline_curve",
    "median_of",
    "penalized_log_posterior",
    "penalized_log_posterior_grad",
    "select_lambda_gcv",
    "fit_spline_auto",
    "DEFAULT_LAMBDA_GRID",
]

DEFAULT_LAMBDA_GRID = tuple(10.0 ** k for k in range(-3, 4))

# Bounds on the unconstrained coefficients during optimization. The probit
# upper bound is tighter: phi/Phi ratios are computed as exp of a difference
# of logs, which cancels catastrophically once |eta| passes ~1e6, and eta is
# bounded by q * exp(max beta).
_BETA_BOUNDS = {"logit": (-30.0, 30.0), "probit": (-30.0, 11.0)}


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VisitSeries:
    """Per-visit 0/1 status reports at distinct integer days."""

    days: np.ndarray
    reports: np.ndarray

    def __post_init__(self):
        days = np.asarray(self.days, dtype=int)
        reports = np.asarray(self.reports, dtype=int)
        if days.shape != reports.shape or days.ndim != 1:
            raise ConfigurationError("days and reports must be 1-d and the same length")
        order = np.argsort(days, kind="stable")
        days, reports = days[order], reports[order]
        if days.size and np.any(np.diff(days) == 0):
            raise ConfigurationError("visit days must be unique")
        if np.any((reports != 0) & (reports != 1)):
            raise ConfigurationError("reports must be 0 or 1")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "reports", reports)

    def __len__(self) -> int:
        return self.days.size


@dataclass(frozen=True)
class SiteCounts:
    """Aggregated counts: ``positives`` of ``monitors`` reported the event."""

    days: np.ndarray
    positives: np.ndarray
    monitors: np.ndarray

    def __post_init__(self):
        days = np.asarray(self.days, dtype=int)
        pos = np.asarray(self.positives, dtype=int)
        mon = np.asarray(self.monitors, dtype=int)
        if not (days.shape == pos.shape == mon.shape) or days.ndim != 1:
            raise ConfigurationError("days, positives, monitors must be 1-d and equal length")
        order = np.argsort(days, kind="stable")
        days, pos, mon = days[order], pos[order], mon[order]
        if days.size and np.any(np.diff(days) == 0):
            raise ConfigurationError("days must be unique after aggregation")
        if np.any(mon < 1):
            raise ConfigurationError("monitor counts must be positive")
        if np.any(pos < 0) or np.any(pos > mon):
            raise ConfigurationError("need 0 <= positives <= monitors")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "positives", pos)
        object.__setattr__(self, "monitors", mon)

    def __len__(self) -> int:
        return self.days.size

    @staticmethod
    def empty() -> "SiteCounts":
        z = np.zeros(0, dtype=int)
        counts = object.__new__(SiteCounts)
        object.__setattr__(counts, "days", z)
        object.__setattr__(counts, "positives", z.copy())
        object.__setattr__(counts, "monitors", z.copy())
        return counts


def as_counts(data) -> SiteCounts:
    """Coerce a VisitSeries (m = 1 per day) or SiteCounts to SiteCounts."""
    if isinstance(data, SiteCounts):
        return data
    if isinstance(data, VisitSeries):
        return SiteCounts(data.days, data.reports, np.ones_like(data.days))
    raise ConfigurationError(f"expected VisitSeries or SiteCounts, got {type(data).__name__}")


@dataclass(frozen=True)
class BloomCurve:
    """Estimated bloom CDF on an integer day grid.

    ``at(0)`` is 0 by convention; moment sums that start at t = 0 rely on it.
    """

    days: np.ndarray
    values: np.ndarray
    source: str = "truth"

    def __post_init__(self):
        days = np.asarray(self.days, dtype=int)
        values = np.asarray(self.values, dtype=float)
        if days.shape != values.shape or days.ndim != 1 or days.size == 0:
            raise ConfigurationError("days and values must be 1-d, nonempty, equal length")
        if np.any(np.diff(days) <= 0):
            raise ConfigurationError("curve days must be strictly increasing")
        if values.min() < -1e-9 or values.max() > 1 + 1e-9:
            raise ConfigurationError("curve values must lie in [0, 1]")
        if np.any(np.diff(values) < -1e-9):
            raise ConfigurationError("curve values must be nondecreasing")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "values", np.clip(values, 0.0, 1.0))

    def at(self, t: int) -> float:
        if t == 0:
            return 0.0
        idx = np.searchsorted(self.days, t)
        if idx >= self.days.size or self.days[idx] != t:
            raise ConfigurationError(f"curve not defined at day {t}")
        return float(self.values[idx])


def median_of(curve: BloomCurve) -> Optional[int]:
    """First grid day with F(t) > 0.5, or None if never exceeded."""
    above = curve.values > 0.5
    if not above.any():
        return None
    return int(curve.days[int(np.argmax(above))])


def naive_estimate(data) -> Optional[int]:
    """First day with a positive report, or None if none was made."""
    counts = as_counts(data)
    positive = counts.positives > 0
    if not positive.any():
        return None
    return int(counts.days[int(np.argmax(positive))])


# ---------------------------------------------------------------------------
# Link functions (outer CDF applied to the linear/monotone predictor)
# ---------------------------------------------------------------------------

def _check_link(link: str) -> str:
    if link not in ("logit", "probit"):
        raise ConfigurationError(f"unknown link {link!r}; use 'logit' or 'probit'")
    return link


def link_inverse(eta, link: str):
    """p = inv_link(eta)."""
    if link == "logit":
        return special.expit(eta)
    return special.ndtr(eta)


def _binomial_loglik(eta, y, m, link: str) -> float:
    if link == "logit":
        # y*eta - m*log(1 + exp(eta)), stable for large |eta|
        return float(np.sum(y * eta - m * np.logaddexp(0.0, eta)))
    return float(np.sum(y * special.log_ndtr(eta) + (m - y) * special.log_ndtr(-eta)))


def _binomial_dl_deta(eta, y, m, link: str) -> np.ndarray:
    if link == "logit":
        return y - m * special.expit(eta)
    # phi/Phi ratios computed in log space for tail stability
    log_phi = -0.5 * eta**2 - 0.5 * np.log(2.0 * np.pi)
    r_pos = np.exp(log_phi - special.log_ndtr(eta))
    r_neg = np.exp(log_phi - special.log_ndtr(-eta))
    return y * r_pos - (m - y) * r_neg


def _binomial_weights(eta, m, link: str) -> np.ndarray:
    """Fisher weights w_i = m * Var^-1-scaled squared link derivative."""
    p = np.clip(link_inverse(eta, link), 1e-12, 1 - 1e-12)
    if link == "logit":
        return m * p * (1.0 - p)
    phi = np.exp(-0.5 * eta**2) / np.sqrt(2.0 * np.pi)
    return m * phi**2 / (p * (1.0 - p))


# ---------------------------------------------------------------------------
# Probit baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbitFit:
    alpha0: float
    alpha1: float
    n_iter: int
    converged: bool
    ridge: float


def fit_probit(data, ridge: float = 0.0, max_iter: int = 100, tol: float = 1e-8) -> ProbitFit:
    """Probit regression p(t) = Phi(alpha0 + alpha1 * t) by damped Newton.

    The fit runs on standardized days; ``ridge`` penalizes the squared
    standardized coefficients, so with ridge = 0 the result is the MLE when
    it exists. Perfect separation with ridge = 0 raises
    :class:`SeparationError` telling the caller to retry with ridge > 0.
    """
    counts = as_counts(data)
    if len(counts) == 0:
        raise ConfigurationError("cannot fit probit to an empty series")
    if ridge < 0:
        raise ConfigurationError("ridge must be nonnegative")
    t = counts.days.astype(float)
    y = counts.positives.astype(float)
    m = counts.monitors.astype(float)
    mu, sd = t.mean(), t.std()
    if sd == 0:
        sd = 1.0
    z = (t - mu) / sd
    design = np.column_stack([np.ones_like(z), z])

    coef = np.zeros(2)
    trace = []

    def penalized_ll(c):
        return _binomial_loglik(design @ c, y, m, "probit") - 0.5 * ridge * float(c @ c)

    ll = penalized_ll(coef)
    converged = False
    for it in range(1, max_iter + 1):
        eta = design @ coef
        grad = design.T @ _binomial_dl_deta(eta, y, m, "probit") - ridge * coef
        gnorm = float(np.abs(grad).max())
        trace.append((it, ll, gnorm))
        if gnorm < tol:
            converged = True
            break
        w = _binomial_weights(eta, m, "probit")
        info = (design * w[:, None]).T @ design + ridge * np.eye(2)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise FitError("singular information matrix in probit fit", trace)
        # damped update: halve the step until the objective improves
        scale = 1.0
        for _ in range(40):
            cand = coef + scale * step
            ll_cand = penalized_ll(cand)
            if ll_cand >= ll - 1e-12:
                break
            scale *= 0.5
        coef = coef + scale * step
        ll = penalized_ll(coef)
        if float(np.linalg.norm(coef)) > 1e4:
            if ridge == 0.0:
                raise SeparationError(
                    "perfect separation: probit MLE does not exist; retry with ridge > 0",
                    trace,
                )
            raise FitError("probit coefficients diverged despite ridge", trace)
    if not converged:
        raise FitError(f"probit fit did not converge in {max_iter} iterations", trace)
    a, b = coef
    return ProbitFit(
        alpha0=float(a - b * mu / sd),
        alpha1=float(b / sd),
        n_iter=it,
        converged=True,
        ridge=ridge,
    )


def probit_curve(fit: ProbitFit, days=None) -> BloomCurve:
    """Evaluate the fitted probit CDF on the integer day grid."""
    if days is None:
        days = np.arange(1, 181)
    days = np.asarray(days, dtype=int)
    values = special.ndtr(fit.alpha0 + fit.alpha1 * days)
    return BloomCurve(days=days, values=values, source="probit")


# ---------------------------------------------------------------------------
# Penalized monotone-spline fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    """Priors: normal on the intercept, gamma on the positive increments.

    ``increment_shape``/``increment_rate`` parameterize the gamma as
    shape/rate; set ``rate_is_scale`` to reinterpret the second parameter
    as a scale instead.
    """

    intercept_sd: float = 50.0
    increment_shape: float = 1.3
    increment_rate: float = 0.3
    rate_is_scale: bool = False

    def __post_init__(self):
        if min(self.intercept_sd, self.increment_shape, self.increment_rate) <= 0:
            raise ConfigurationError("prior parameters must all be positive")

    @property
    def rate(self) -> float:
        return 1.0 / self.increment_rate if self.rate_is_scale else self.increment_rate


def _log_prior_and_grad(beta: np.ndarray, prior: Optional[PriorSpec]):
    if prior is None:
        return 0.0, np.zeros_like(beta)
    a, b = prior.increment_shape, prior.rate
    exp_tail = np.exp(beta[1:])
    # intercept ~ N(0, sd^2); exp(beta_k) ~ Gamma(a, b) with the change of
    # variables giving a*beta_k - b*exp(beta_k) in beta space
    value = -0.5 * beta[0] ** 2 / prior.intercept_sd**2
    value += float(np.sum(a * beta[1:] - b * exp_tail))
    grad = np.empty_like(beta)
    grad[0] = -beta[0] / prior.intercept_sd**2
    grad[1:] = a - b * exp_tail
    return value, grad


def _penalized_value_and_grad(beta, counts, basis, lam, prior, link, design):
    btilde = transform_coefficients(beta)
    eta = design @ btilde
    value = _binomial_loglik(eta, counts.positives, counts.monitors, link)
    jac = np.ones_like(beta)
    jac[1:] = btilde[1:]  # d btilde_k / d beta_k = exp(beta_k) for k > 1
    u = _binomial_dl_deta(eta, counts.positives, counts.monitors, link)
    grad = jac * (design.T @ u)
    pv, pg = _log_prior_and_grad(beta, prior)
    pen = basis.penalty @ beta
    return value + pv - 0.5 * lam * float(beta @ pen), grad + pg - lam * pen


def penalized_log_posterior(beta, counts: SiteCounts, basis: MonotoneBasis,
                            lam: float, prior: Optional[PriorSpec] = None,
                            link: str = "logit", design=None) -> float:
    """Binomial log-lik + log prior - lam * b'Pb / 2, in unconstrained b."""
    beta = np.asarray(beta, dtype=float)
    if design is None:
        design = basis_matrix(basis, counts.days) @ basis.shape
    return _penalized_value_and_grad(beta, counts, basis, lam, prior, link, design)[0]


def penalized_log_posterior_grad(beta, counts: SiteCounts, basis: MonotoneBasis,
                                 lam: float, prior: Optional[PriorSpec] = None,
                                 link: str = "logit", design=None) -> np.ndarray:
    """Analytic gradient of :func:`penalized_log_posterior`."""
    beta = np.asarray(beta, dtype=float)
    if design is None:
        design = basis_matrix(basis, counts.days) @ basis.shape
    return _penalized_value_and_grad(beta, counts, basis, lam, prior, link, design)[1]


@dataclass(frozen=True)
class SplineFit:
    beta: np.ndarray
    lam: float
    link: str
    objective: float
    converged: bool
    degenerate: bool = False
    message: str = ""


def _location_init(counts: SiteCounts, link: str) -> float:
    total_m = counts.monitors.sum()
    phat = counts.positives.sum() / total_m if total_m else 0.5
    phat = float(np.clip(phat, 1e-3, 1 - 1e-3))
    return float(np.log(phat / (1 - phat)) if link == "logit" else special.ndtri(phat))


def _default_inits(counts: SiteCounts, q: int, link: str) -> list[np.ndarray]:
    """Flat curve at the empirical rate plus four deterministic ramps."""
    inits = []
    flat = np.full(q, -10.0)
    flat[0] = _location_init(counts, link)
    inits.append(flat)
    for level, rise in ((-4.0, 8.0), (-8.0, 16.0), (-2.0, 4.0), (-6.0, 8.0)):
        ramp = np.full(q, np.log(rise / max(q - 1, 1)))
        ramp[0] = level
        inits.append(ramp)
    return inits


def _boundary_flat_fit(counts: SiteCounts, basis: MonotoneBasis, lam: float,
                       link: str, all_ones: bool) -> SplineFit:
    beta = np.full(basis.q, -20.0)
    beta[0] = 6.0 if all_ones else -6.0
    return SplineFit(
        beta=beta,
        lam=lam,
        link=link,
        objective=penalized_log_posterior(beta, counts, basis, lam, None, link),
        converged=True,
        degenerate=True,
        message="all reports identical; returning a boundary-flat curve",
    )


def fit_spline_map(data, basis: MonotoneBasis, lam: float,
                   prior: Optional[PriorSpec] = None, link: str = "logit",
                   inits: Optional[Sequence[np.ndarray]] = None,
                   maxiter: int = 400, design: Optional[np.ndarray] = None,
                   ftol: float = 2.2e-9, gtol: float = 1e-5) -> SplineFit:
    """Maximize the penalized log posterior over the unconstrained b.

    Runs L-BFGS-B with the analytic gradient from several deterministic
    starting points (falling back to numerical gradients if a run goes
    non-finite) and returns the best optimum. All-0 or all-1 data short
    circuit to a boundary-flat curve flagged as degenerate.
    """
    link = _check_link(link)
    if lam < 0:
        raise ConfigurationError("lambda must be nonnegative")
    counts = as_counts(data)
    if len(counts) == 0 and prior is None and lam == 0:
        raise ConfigurationError("nothing to fit: empty data with no prior or penalty")
    if len(counts):
        total_pos = int(counts.positives.sum())
        if total_pos == 0:
            return _boundary_flat_fit(counts, basis, lam, link, all_ones=False)
        if total_pos == int(counts.monitors.sum()):
            return _boundary_flat_fit(counts, basis, lam, link, all_ones=True)
    if design is None:
        design = basis_matrix(basis, counts.days) @ basis.shape

    def neg_obj_grad(beta):
        value, grad = _penalized_value_and_grad(beta, counts, basis, lam, prior, link, design)
        return -value, -grad

    def neg_obj(beta):
        return neg_obj_grad(beta)[0]

    lo, hi = _BETA_BOUNDS[link]
    bounds = [(lo, hi)] * basis.q
    if inits is None:
        inits = _default_inits(counts, basis.q, link)
    opts = {"maxiter": maxiter, "ftol": ftol, "gtol": gtol}
    best = None
    any_success = False
    for x0 in inits:
        x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
        res = optimize.minimize(neg_obj_grad, x0, jac=True, method="L-BFGS-B",
                                bounds=bounds, options=opts)
        if not np.isfinite(res.fun):
            # numerical-gradient fallback for pathological curvature
            res = optimize.minimize(neg_obj, x0, method="L-BFGS-B",
                                    bounds=bounds, options=opts)
        if not np.isfinite(res.fun):
            continue
        any_success = any_success or bool(res.success)
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError("spline MAP optimizer diverged from every start")
    return SplineFit(
        beta=np.asarray(best.x, dtype=float),
        lam=lam,
        link=link,
        objective=-float(best.fun),
        converged=any_success,
        message=str(best.message),
    )


def spline_curve(basis: MonotoneBasis, beta, days=None, link: str = "logit",
                 source: str = "spline") -> BloomCurve:
    """Evaluate F = inv_link(eta) for the fitted coefficients on a day grid."""
    link = _check_link(link)
    if days is None:
        days = np.arange(1, 181)
    days = np.asarray(days, dtype=int)
    design = basis_matrix(basis, days) @ basis.shape
    eta = design @ transform_coefficients(np.asarray(beta, dtype=float))
    values = link_inverse(eta, link)
    # the construction is monotone; wash out mere floating-point wiggles
    values = np.maximum.accumulate(values)
    return BloomCurve(days=days, values=values, source=source)


# ---------------------------------------------------------------------------
# Smoothing-parameter selection
# ---------------------------------------------------------------------------

def _deviance_and_edf(fit: SplineFit, counts: SiteCounts, basis: MonotoneBasis,
                      design: Optional[np.ndarray] = None) -> tuple[float, float]:
    if design is None:
        design = basis_matrix(basis, counts.days) @ basis.shape
    btilde = transform_coefficients(fit.beta)
    eta = design @ btilde
    y = counts.positives.astype(float)
    m = counts.monitors.astype(float)
    ll = _binomial_loglik(eta, y, m, fit.link)
    with np.errstate(divide="ignore", invalid="ignore"):
        ll_sat = np.where(y > 0, y * np.log(y / m), 0.0)
        ll_sat += np.where(m - y > 0, (m - y) * np.log(1 - y / m), 0.0)
    deviance = 2.0 * (float(ll_sat.sum()) - ll)
    jac = np.ones(basis.q)
    jac[1:] = btilde[1:]
    dmat = design * jac[None, :]  # d eta / d beta at the optimum
    w = _binomial_weights(eta, m, fit.link)
    xtwx = (dmat * w[:, None]).T @ dmat
    ridge = 1e-10 * np.eye(basis.q)
    edf = float(np.trace(np.linalg.solve(xtwx + fit.lam * basis.penalty + ridge, xtwx)))
    return deviance, edf


def select_lambda_gcv(data, basis: MonotoneBasis, lambda_grid=DEFAULT_LAMBDA_GRID,
                      prior: Optional[PriorSpec] = None, link: str = "logit"):
    """Pick lambda on a grid by approximate GCV, n*D / (n - edf)^2.

    The path is walked from the stiffest lambda down, warm-starting each fit
    at the previous optimum. Returns (lam, {lam: gcv score}).
    """
    counts = as_counts(data)
    design = basis_matrix(basis, counts.days) @ basis.shape
    grid = sorted(lambda_grid, reverse=True)
    n = len(counts)
    scores = {}
    warm = None
    best_lam, best_score = grid[0], np.inf
    for lam in grid:
        # stiffest fit first from the flat start, then warm-start down the path
        inits = _default_inits(counts, basis.q, link)[:1] if warm is None else [warm]
        fit = fit_spline_map(counts, basis, lam, prior=prior, link=link,
                             inits=inits, design=design)
        warm = fit.beta
        deviance, edf = _deviance_and_edf(fit, counts, basis, design=design)
        denom = max(n - edf, 0.5) ** 2
        score = n * deviance / denom
        scores[lam] = score
        if score < best_score - 1e-12:
            best_lam, best_score = lam, score
    return best_lam, scores


def fit_spline_auto(data, basis: MonotoneBasis, lam: Optional[float] = None,
                    lambda_grid=DEFAULT_LAMBDA_GRID,
                    prior: Optional[PriorSpec] = None, link: str = "logit") -> SplineFit:
    """GCV-select lambda (unless given) and fit with the full multistart."""
    counts = as_counts(data)
    if lam is None:
        lam, _ = select_lambda_gcv(counts, basis, lambda_grid, prior=prior, link=link)
    return fit_spline_map(counts, basis, lam, prior=prior, link=link)
