"""Exception types shared across the package."""


class PeakBloomError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(PeakBloomError):
    """Invalid dimensions, settings, priors, or preconditions."""


class CurveDomainError(PeakBloomError):
    """Evaluation requested outside the supported day range."""


class FitError(PeakBloomError):
    """An optimizer failed to converge. Carries the iteration trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class SeparationError(FitError):
    """Perfect separation: the unpenalized MLE does not exist.

    Callers should retry with ridge > 0.
    """


class SamplerError(PeakBloomError):
    """MCMC failure (e.g. zero acceptance over an adaptation window)."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics) if diagnostics is not None else {}


class DiagnosticsError(PeakBloomError):
    """Not enough draws/chains to compute a convergence diagnostic."""


class DegenerateConfigurationError(PeakBloomError):
    """Point configuration with (near-)zero scatter; robust fit undefined."""


class HorizonError(PeakBloomError):
    """Curve does not reach 1 at the stated horizon; moment sums invalid."""


class DatasetError(PeakBloomError):
    """Malformed or inconsistent input data. Carries the offending line."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
