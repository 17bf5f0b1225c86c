"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array widths or counts do not line up."""


class DomainError(ValueError):
    """A point or coordinate lies outside the region it must be in."""


class NormalizationError(ValueError):
    """A direction that must be unit length is not."""


class OrderingError(ValueError):
    """Ray samples are not sorted by ray parameter."""


class ConfigError(ValueError):
    """Invalid configuration or dataset."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradients during optimisation."""


class BakeError(RuntimeError):
    """The model cannot be converted into render-time assets."""


class LoadError(IOError):
    """A baked file is malformed, truncated or corrupted."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
