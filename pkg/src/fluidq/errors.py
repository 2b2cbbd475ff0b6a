"""Exception types shared across the package."""


class DomainError(ValueError):
    """Argument outside the domain of a function (e.g. a negative age)."""


class OutOfRangeError(ValueError):
    """A requested level lies outside the range of a monotone map."""


class InvalidMeasureError(ValueError):
    """A measure violates a structural requirement (support, sign, ...)."""


class UnsupportedModelError(ValueError):
    """The requested formulation needs densities the laws do not have."""


class ConfigError(ValueError):
    """Scenario or solver configuration is inconsistent."""


class StepFailureError(RuntimeError):
    """The inner fixed point of a time step did not converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
