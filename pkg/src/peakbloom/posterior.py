"""Posterior sampling for the multi-site monotone-spline model.

Each site's coefficient vector is sampled with an adaptive random-walk
Metropolis kernel in the unconstrained parameterization; the target is the
same penalized log posterior the MAP fit maximizes. Sites carry no shared
parameters, so they are sampled independently with per-site sub-seeds
derived from the master seed, and the stored joint log posterior is the
across-site sum at each (chain, iteration).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .basis import MonotoneBasis, basis_matrix
from .errors import ConfigurationError, DiagnosticsError, SamplerError
from .estimators import (
    PriorSpec,
    SiteCounts,
    as_counts,
    fit_spline_map,
    penalized_log_posterior,
)

__all__ = [
    "PriorSpec",
    "PosteriorDraws",
    "MapDraw",
    "adaptive_random_walk",
    "sample_posterior",
    "split_rhat",
    "rhat",
    "rhat_all",
    "map_draw",
]


@dataclass
class PosteriorDraws:
    """Post-warm-up draws: ``draws[chain, iteration, site, coefficient]``."""

    draws: np.ndarray
    log_posterior: np.ndarray
    sites: tuple
    chains: int
    iterations: int
    warmup: int
    seed: int
    lambdas: dict
    link: str = "logit"
    warnings: list = field(default_factory=list)

    @property
    def kept(self) -> int:
        return self.draws.shape[1]

    @property
    def q(self) -> int:
        return self.draws.shape[3]

    def site_index(self, site) -> int:
        try:
            return self.sites.index(site)
        except ValueError:
            raise ConfigurationError(f"unknown site {site!r}") from None


def adaptive_random_walk(logpdf, x0, iterations, warmup, rng, *,
                         initial_scale: float = 0.5,
                         target_low: float = 0.23, target_high: float = 0.44,
                         adapt_window: int = 50):
    """Adaptive random-walk Metropolis with a Gaussian proposal.

    During warm-up the proposal covariance tracks the running covariance of
    the chain (plus a small diagonal floor) and a global scale chases the
    target acceptance window; both freeze at the end of warm-up, so the
    stored draws come from a fixed kernel. Returns (kept draws, kept log
    densities, post-warm-up acceptance rate).

    Raises :class:`SamplerError` when adaptation windows keep accepting
    nothing even after hard rescue shrinks, which signals an unusable
    proposal or target.
    """
    x = np.array(x0, dtype=float)
    d = x.size
    lp = float(logpdf(x))
    if not np.isfinite(lp):
        raise SamplerError("initial state has non-finite log density",
                           {"x0": x.tolist()})
    if warmup >= iterations:
        raise ConfigurationError("warmup must be smaller than iterations")
    scale = initial_scale * 2.38 / np.sqrt(d)
    chol = np.eye(d)
    run_mean = np.zeros(d)
    run_cov = np.zeros((d, d))
    n_seen = 0
    kept = np.empty((iterations - warmup, d))
    kept_lp = np.empty(iterations - warmup)
    window_accepts = 0
    window_count = 0
    batch = 0
    zero_windows = 0
    accepts_after = 0

    for it in range(iterations):
        prop = x + scale * (chol @ rng.standard_normal(d))
        lp_prop = float(logpdf(prop))
        if np.log(rng.random()) < lp_prop - lp:
            x, lp = prop, lp_prop
            if it < warmup:
                window_accepts += 1
            else:
                accepts_after += 1
        if it < warmup:
            window_count += 1
            n_seen += 1
            delta = x - run_mean
            run_mean += delta / n_seen
            run_cov += (np.outer(delta, x - run_mean) - run_cov) / n_seen
            if window_count == adapt_window:
                batch += 1
                rate = window_accepts / window_count
                if window_accepts == 0:
                    zero_windows += 1
                    if zero_windows >= 3:
                        raise SamplerError(
                            "zero acceptance over repeated adaptation windows",
                            {"window": batch, "scale": scale, "log_density": lp},
                        )
                    scale *= 0.2  # hard rescue before giving up
                else:
                    zero_windows = 0
                    step = min(0.5, 2.0 / np.sqrt(batch))
                    if rate > target_high:
                        scale *= np.exp(step)
                    elif rate < target_low:
                        scale *= np.exp(-step)
                    if n_seen > 4 * adapt_window:
                        floor = 1e-6 * max(float(np.trace(run_cov)) / d, 1e-6)
                        chol = np.linalg.cholesky(run_cov + floor * np.eye(d))
                window_accepts = 0
                window_count = 0
        else:
            k = it - warmup
            kept[k] = x
            kept_lp[k] = lp
    accept_rate = accepts_after / max(iterations - warmup, 1)
    return kept, kept_lp, accept_rate


def _site_seed(master: int, site) -> np.random.SeedSequence:
    # keyed on the site id so a site's chains are reproducible regardless of
    # which other sites are in the run
    return np.random.SeedSequence([int(master), zlib.crc32(str(site).encode())])


def sample_posterior(data: Mapping, basis: MonotoneBasis,
                     prior: Optional[PriorSpec] = None,
                     lambdas=0.0, seed: int = 0,
                     chains: int = 10, iterations: int = 3000, warmup: int = 2500,
                     link: str = "logit") -> PosteriorDraws:
    """Sample every site's coefficients; store only post-warm-up draws.

    ``lambdas`` may be a scalar applied to all sites or a per-site mapping.
    The per-site target is the binomial log likelihood plus log priors minus
    the quadratic smoothness penalty, identical to the MAP objective.
    """
    if prior is None:
        prior = PriorSpec()
    if chains < 1 or iterations < 2 or not 0 < warmup < iterations:
        raise ConfigurationError("need chains >= 1 and 0 < warmup < iterations")
    sites = tuple(sorted(data.keys()))
    if not sites:
        raise ConfigurationError("no sites to sample")
    counts = {s: as_counts(data[s]) for s in sites}
    if np.isscalar(lambdas):
        lam_map = {s: float(lambdas) for s in sites}
    else:
        lam_map = {s: float(lambdas[s]) for s in sites}
    if any(v < 0 for v in lam_map.values()):
        raise ConfigurationError("lambdas must be nonnegative")

    kept_n = iterations - warmup
    J, q = len(sites), basis.q
    draws = np.empty((chains, kept_n, J, q))
    logpost = np.zeros((chains, kept_n))
    warnings = []

    for j, site in enumerate(sites):
        c = counts[site]
        lam = lam_map[site]
        design = basis_matrix(basis, c.days) @ basis.shape

        def logpdf(beta, _c=c, _lam=lam, _design=design):
            return penalized_log_posterior(beta, _c, basis, _lam, prior, link,
                                           design=_design)

        map_fit = fit_spline_map(c, basis, lam, prior=prior, link=link)
        if map_fit.degenerate:
            warnings.append(f"site {site}: degenerate data (all reports identical)")
        chain_seeds = _site_seed(seed, site).spawn(chains)
        for ch in range(chains):
            rng = np.random.default_rng(chain_seeds[ch])
            x0 = map_fit.beta + 0.25 * rng.standard_normal(q)
            site_draws, site_lp, rate = adaptive_random_walk(
                logpdf, x0, iterations, warmup, rng)
            draws[ch, :, j, :] = site_draws
            logpost[ch, :] += site_lp
            if rate < 0.05:
                warnings.append(
                    f"site {site} chain {ch}: low post-warm-up acceptance {rate:.3f}")

    return PosteriorDraws(
        draws=draws,
        log_posterior=logpost,
        sites=sites,
        chains=chains,
        iterations=iterations,
        warmup=warmup,
        seed=int(seed),
        lambdas=lam_map,
        link=link,
        warnings=warnings,
    )


def split_rhat(chains_by_iters: np.ndarray) -> float:
    """Split-Rhat for one parameter given a (chains, iterations) array.

    Zero within-chain variance returns 1.0 by convention rather than NaN so
    automated gates keep working on constant chains.
    """
    x = np.asarray(chains_by_iters, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DiagnosticsError("need at least 2 chains")
    n = x.shape[1]
    if n < 10:
        raise DiagnosticsError("need at least 10 post-warm-up iterations")
    half = n // 2
    seqs = np.concatenate([x[:, :half], x[:, half: 2 * half]], axis=0)
    within = seqs.var(axis=1, ddof=1)
    w = float(within.mean())
    if w <= 0.0:
        return 1.0
    means = seqs.mean(axis=1)
    b_over_n = float(means.var(ddof=1))
    var_plus = (half - 1) / half * w + b_over_n
    return float(np.sqrt(var_plus / w))


def rhat(draws: PosteriorDraws, site, coef: int) -> float:
    """Split-Rhat for one site's coefficient across chains."""
    j = draws.site_index(site) if not isinstance(site, (int, np.integer)) else int(site)
    return split_rhat(draws.draws[:, :, j, int(coef)])


def rhat_all(draws: PosteriorDraws) -> np.ndarray:
    """Split-Rhat for every (site, coefficient); shape (J, q)."""
    J, q = len(draws.sites), draws.q
    out = np.empty((J, q))
    for j in range(J):
        for k in range(q):
            out[j, k] = split_rhat(draws.draws[:, :, j, k])
    return out


@dataclass(frozen=True)
class MapDraw:
    chain: int
    iteration: int
    log_posterior: float
    coefficients: dict


def map_draw(draws: PosteriorDraws) -> MapDraw:
    """The stored draw with the highest joint log posterior.

    Ties break to the earliest chain, then the earliest iteration (numpy
    argmax in row-major order does exactly that).
    """
    if draws.log_posterior.size == 0:
        raise ConfigurationError("no stored draws")
    flat = int(np.argmax(draws.log_posterior))
    ch, it = np.unravel_index(flat, draws.log_posterior.shape)
    coeffs = {site: draws.draws[ch, it, j, :].copy()
              for j, site in enumerate(draws.sites)}
    return MapDraw(chain=int(ch), iteration=int(it),
                   log_posterior=float(draws.log_posterior[ch, it]),
                   coefficients=coeffs)
