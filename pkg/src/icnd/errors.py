"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(ValueError):
    """Input is well-formed but numerically degenerate (e.g. a zero vector)."""


class TrainingDivergenceError(RuntimeError):
    """A loss or gradient became non-finite during training."""


class UsageError(RuntimeError):
    """An object was used before it was ready (e.g. scoring with an untrained model)."""


class PGMParseError(ValueError):
    """Malformed portable graymap header or payload."""


class UnsupportedFormatError(ValueError):
    """Well-formed file in a variant this package does not read."""


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given inputs."""


class StageDependencyError(RuntimeError):
    """A pipeline stage was run before the artifacts it consumes exist."""

    def __init__(self, stage, missing, hint):
        self.stage = stage
        self.missing = missing
        self.hint = hint
        super().__init__(f"stage '{stage}' needs {missing}; {hint}")
