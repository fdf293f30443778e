class ValidationError(ValueError):
    """Bad input, config or precondition."""


class CheckpointError(ValidationError):
    """A checkpoint file is corrupt, truncated or incompatible."""


class GradCheckError(RuntimeError):
    """A gradient check exceeded its tolerance."""
