"""Custom exceptions for the routing-aligned MoE toolkit."""


class RaMoeError(Exception):
    """Base exception for toolkit errors."""
    pass


class ConfigurationError(RaMoeError):
    """Raised when a configuration value violates its constraints."""
    pass


class InputError(RaMoeError):
    """Raised when tokens, shapes or distributions are malformed."""
    pass


class DegenerateSampleError(RaMoeError):
    """Raised when a sample has no positions to score (empty mask or response)."""
    pass


class NonFiniteLossError(RaMoeError):
    """Raised when a loss evaluates to NaN or infinity."""
    pass


class DegenerateProfileError(RaMoeError):
    """Raised when a divergence profile has no layer strictly below the threshold."""
    pass


class IdMismatchError(RaMoeError):
    """Raised when paired collections do not cover the same example ids."""
    pass


class InsufficientDataError(RaMoeError):
    """Raised when there are too few usable records for a statistic."""
    pass


class MissingArtifactError(RaMoeError):
    """Raised when an upstream stage artifact is not on disk."""

    def __init__(self, path: str, stage: str = ""):
        self.path = path
        self.stage = stage
        hint = f" (run the '{stage}' stage first)" if stage else ""
        super().__init__(f"Missing required artifact: {path}{hint}")


class ConfigMismatchError(RaMoeError):
    """Raised when a stage directory exists with a different config or inputs."""
    pass


class EvalSetMismatchError(RaMoeError):
    """Raised when runs being compared were evaluated on different eval sets."""
    pass
