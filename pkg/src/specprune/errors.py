"""Exception hierarchy shared across the package."""


class SpecPruneError(Exception):
    """Base class for every error this package raises on purpose."""


class DimensionError(SpecPruneError):
    """Tensor shapes incompatible with the requested operation."""


class UsageError(SpecPruneError):
    """API called outside its contract (bad arguments, wrong state)."""


class ConfigError(SpecPruneError):
    """A configuration value violates its documented constraints."""


class CapacityError(SpecPruneError):
    """Sequence would exceed the model's maximum context length."""


class FormatError(SpecPruneError):
    """Malformed checkpoint or report file.

    Carries the byte offset at which decoding failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IngestionError(SpecPruneError):
    """Corpus file missing, empty, or otherwise unusable."""


class TrainingError(SpecPruneError):
    """Training diverged or was asked to do something impossible."""


class NumericError(SpecPruneError):
    """NaN or Inf showed up where finite values are required."""


class BenchError(SpecPruneError):
    """A benchmark run produced no usable measurement."""
