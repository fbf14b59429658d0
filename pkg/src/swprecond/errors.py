"""Exception types shared across the package."""


class NumericalBlowup(FloatingPointError):
    """A model integration produced non-finite values."""

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state after step {step_index}")


class ShapeError(ValueError):
    """Array dimensions do not match the grid or operator."""


class DegenerateOutput(ArithmeticError):
    """Surrogate produced a (numerically) rank-deficient basis."""


class VersionError(ValueError):
    """Binary file has a wrong magic tag, version, or is truncated."""


class ConfigError(ValueError):
    """Invalid configuration document."""
