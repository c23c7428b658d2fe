"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
MissingArtifactError -> 3, NumericalError -> 4.
"""


class VoximageError(Exception):
    """Base class for package errors."""


class ShapeError(VoximageError):
    """Operand shapes are incompatible.  Message carries both shapes."""


class ConfigError(VoximageError):
    """A config file, preset name, or option value is invalid."""


class MissingArtifactError(VoximageError):
    """A required input artifact (dataset, checkpoint) does not exist."""


class NumericalError(VoximageError):
    """A non-finite value or a numerically impossible state was produced."""


class GradCheckError(NumericalError):
    """The gradient checker could not run (e.g. non-deterministic loss)."""
