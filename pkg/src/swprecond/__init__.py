"""Matrix-free incremental 4D-Var on a shallow-water model with learned spectral preconditioners."""

from .errors import ConfigError, DegenerateOutput, NumericalBlowup, ShapeError, VersionError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DegenerateOutput", "NumericalBlowup", "ShapeError", "VersionError"]
