"""Event-time estimation from binary status-monitoring reports.

Corrects the bias of first-report estimators with a monotone-spline model
of the bloom distribution, benchmarks estimators on simulated monitoring
data, and flags anomalous sites via robust distances on the principal
components of the comonotone between-site covariance.
"""

from .basis import MonotoneBasis, build_basis, eval_basis_row, eval_monotone_link
from .errors import (
    ConfigurationError,
    CurveDomainError,
    DatasetError,
    DegenerateConfigurationError,
    DiagnosticsError,
    FitError,
    HorizonError,
    PeakBloomError,
    SamplerError,
    SeparationError,
)
from .estimators import (
    BloomCurve,
    PriorSpec,
    SiteCounts,
    VisitSeries,
    fit_probit,
    fit_spline_auto,
    fit_spline_map,
    median_of,
    naive_estimate,
    probit_curve,
    spline_curve,
)
from .multisite import (
    AnomalyConfig,
    AnomalyReport,
    anomaly_scores,
    covariance_matrix,
    covariance_of,
    fast_mcd,
    mahalanobis,
    principal_components,
    site_scores,
    variance_of,
)
from .posterior import PosteriorDraws, map_draw, rhat, rhat_all, sample_posterior, split_rhat
from .simulation import SimResult, TruthSpec, run_study, simulate_sites, simulate_visits, truth_cdf

__version__ = "0.1.0"

__all__ = [
    "MonotoneBasis",
    "build_basis",
    "eval_basis_row",
    "eval_monotone_link",
    "BloomCurve",
    "PriorSpec",
    "SiteCounts",
    "VisitSeries",
    "fit_probit",
    "fit_spline_auto",
    "fit_spline_map",
    "median_of",
    "naive_estimate",
    "probit_curve",
    "spline_curve",
    "PosteriorDraws",
    "map_draw",
    "rhat",
    "rhat_all",
    "sample_posterior",
    "split_rhat",
    "TruthSpec",
    "SimResult",
    "run_study",
    "simulate_sites",
    "simulate_visits",
    "truth_cdf",
    "AnomalyConfig",
    "AnomalyReport",
    "anomaly_scores",
    "covariance_matrix",
    "covariance_of",
    "fast_mcd",
    "mahalanobis",
    "principal_components",
    "site_scores",
    "variance_of",
    "PeakBloomError",
    "ConfigurationError",
    "CurveDomainError",
    "DatasetError",
    "DegenerateConfigurationError",
    "DiagnosticsError",
    "FitError",
    "HorizonError",
    "SamplerError",
    "SeparationError",
]
