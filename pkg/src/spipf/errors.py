"""Exception types raised across the package."""


class HybridError(Exception):
    """Base class for errors raised while integrating a hybrid system."""


class MultipleGuardError(HybridError):
    """More than one guard fired inside a single integration step."""


class NumericalDivergenceError(HybridError, FloatingPointError):
    """A state, Jacobian or cost became non-finite."""


class GrazingContactError(HybridError):
    """The flow is tangent to the guard, so the saltation matrix is undefined."""


class OracleInapplicableError(HybridError):
    """A perturbed trajectory never reached the guard inside the search horizon."""


class ModeMismatchError(HybridError):
    """A state and a reference live in modes that cannot be reconciled."""


class SingularConfigurationError(HybridError):
    """The system reached a configuration where its dynamics are undefined."""


class SolverStalledError(RuntimeError):
    """iLQR regularization hit its ceiling.

    The last valid gain schedule is kept on ``schedule`` so callers can
    decide whether to use it anyway.
    """

    def __init__(self, message, schedule=None):
        super().__init__(message)
        self.schedule = schedule


class DegenerateEnsembleError(RuntimeError):
    """Every particle weight underflowed or was invalid."""


class FilterFailureError(RuntimeError):
    """The filter could not produce an estimate at some step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ExperimentError(RuntimeError):
    """Too many trials failed for an experiment to be meaningful."""


class ConfigError(ValueError):
    """An experiment config file is malformed."""
