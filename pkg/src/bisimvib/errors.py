"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid environment, model or experiment configuration."""


class UsageError(ValueError):
    """An API was called with arguments that violate its preconditions."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""


class GoalNotRepresented(RuntimeError):
    """No dataset transition reaches the requested goal."""


class AggregationError(ValueError):
    """Run directories cannot be aggregated because their configs differ."""

    def __init__(self, keys):
        self.keys = list(keys)
        super().__init__("configs differ on keys: " + ", ".join(self.keys))
