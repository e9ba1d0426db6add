"""Error hierarchy. Each category carries the CLI exit code it maps to (2 is argparse usage)."""


class ShipgateError(Exception):
    category = "error"
    exit_code = 1


class InvalidInputError(ShipgateError, ValueError):
    category = "invalid-input"
    exit_code = 3


class ShapeMismatchError(InvalidInputError):
    category = "shape-mismatch"
    exit_code = 4


class GraphValidationError(ShipgateError, ValueError):
    """Raised when a model graph is inconsistent; ``layer_index`` names the offender."""

    category = "graph-validation"
    exit_code = 5

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class ModelFormatError(ShipgateError):
    category = "model-format"
    exit_code = 6


class MalformedHeaderError(ModelFormatError):
    category = "malformed-header"


class TruncatedPayloadError(ModelFormatError):
    category = "truncated-payload"


class ChecksumMismatchError(ModelFormatError):
    category = "checksum-mismatch"


class UnsupportedVersionError(ModelFormatError):
    category = "unsupported-version"


class RecordFormatError(InvalidInputError):
    """A row in an input CSV is malformed. ``line`` is 1-based, header included."""

    category = "record-format"
    exit_code = 7

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingFileError(ShipgateError, FileNotFoundError):
    category = "missing-file"
    exit_code = 8
