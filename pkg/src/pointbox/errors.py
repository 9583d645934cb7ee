"""Exception types shared across the package."""


class PointboxError(Exception):
    """Base class for errors raised by this package."""


class FormatError(PointboxError):
    """A binary or text payload does not match its declared format."""


class ValidationError(PointboxError):
    """Input data violates a documented invariant."""


class ConfigError(PointboxError):
    """A configuration value or combination of values is invalid."""


class TrainingDivergedError(PointboxError):
    """Training produced a non-finite loss."""

    def __init__(self, image_id: str, message: str | None = None):
        self.image_id = image_id
        super().__init__(message or f"non-finite loss on image {image_id!r}")
