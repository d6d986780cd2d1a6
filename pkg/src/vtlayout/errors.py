"""Exception taxonomy shared across the pipeline.

The CLI maps these onto exit codes: ConfigurationError -> 1, DataError and
its subclasses -> 2, DivergenceError -> 3.
"""


class VTLayoutError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(VTLayoutError):
    """Invalid or inconsistent configuration (bad keys, bad values, bad wiring)."""


class DataError(VTLayoutError):
    """Problems with input data (corpora, detection files, caches, models)."""


class FormatError(DataError):
    """A file failed to parse; carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(DataError):
    """A file parsed but violates the expected schema."""


class IntegrityError(DataError):
    """Cross-reference or container consistency failure (dangling ids, truncation)."""


class PageLookupError(DataError):
    """A page id could not be resolved against the corpus."""


class DegenerateInputError(DataError):
    """An input was too small or empty to process (e.g. a zero-area crop)."""


class CompatibilityError(DataError):
    """A persisted artifact does not match the requested configuration."""


class InputError(DataError):
    """A model was fed an incomplete or malformed input bundle."""


class ShapeError(VTLayoutError):
    """Array dimensions do not match what a layer or weight file expects."""


class DivergenceError(VTLayoutError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index
