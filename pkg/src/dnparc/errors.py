"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Malformed or out-of-contract input."""


class InvalidSpecError(InvalidInputError):
    """Synthetic cohort specification that cannot be generated."""


class DegenerateClusterError(ArithmeticError):
    """A cluster received zero total soft-assignment mass."""

    def __init__(self, message, components=()):
        super().__init__(message)
        self.components = tuple(components)


class UndefinedMetricError(ValueError):
    """Metric is undefined for the given labelling (e.g. one cluster)."""


class TrainingFailureError(RuntimeError):
    """Joint training could not recover from repeated degenerate clusters."""
