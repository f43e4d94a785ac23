"""Exception hierarchy shared by all pipeline stages.

Every error carries a short machine-parsable ``code`` so the CLI can emit
single-line diagnostics and map failures to exit codes.
"""


class DasganError(Exception):
    """Base class for all domain errors raised by this package."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


class InvalidInputError(DasganError):
    """Inputs violate a documented precondition (shape, range, pairing)."""

    code = "invalid-input"


class InvalidLabelError(DasganError):
    """A label map contains values outside the legal class set."""

    code = "invalid-label"


class InvalidArgumentError(DasganError):
    """A scalar argument is out of its legal range."""

    code = "invalid-argument"


class ConfigurationError(DasganError):
    """A configuration value is unusable (singular stain matrix, bad factor)."""

    code = "configuration"


class DegenerateInputError(DasganError):
    """Input carries no usable signal (constant channel, blank tile)."""

    code = "degenerate-input"


class NoEpitheliumError(DasganError):
    """A mask has no epithelial pixels, so no TC score can be formed."""

    code = "no-epithelium"


class UndefinedMetricError(DasganError):
    """A metric is undefined on this input (all pixels ignored, constant vector)."""

    code = "undefined-metric"


class TrainingDivergenceError(DasganError):
    """A loss became non-finite during optimization."""

    code = "training-divergence"
