# file: core/errors.py
"""Exception types raised by the pipeline.

Every error carries the process exit code the command line front end
should return when it escapes a command: 1 for usage problems, 2 for bad
input data. Anything that is not an ``SdrError`` is treated as an internal
failure (exit code 3).
"""

# --- Exit codes ---
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class SdrError(Exception):
    """Base class for all pipeline errors."""
    exit_code = EXIT_DATA


class ArgumentError(SdrError, ValueError):
    """Invalid argument or configuration value."""
    exit_code = EXIT_USAGE


class FormatError(SdrError):
    """Malformed or truncated file (WAV header, .fmx, .nrm, .ckpt)."""


class UnsupportedError(SdrError):
    """Well-formed file using a codec or layout we do not read."""


class ParseError(SdrError):
    """Transcript line that cannot be parsed."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EmptySegmentsError(SdrError):
    """No participant speech left after segmentation."""


class EmptyFeaturesError(SdrError):
    """Segments too short to produce a single analysis frame."""


class ShapeError(SdrError, ValueError):
    """Array shapes do not line up."""


class LabelError(SdrError, ValueError):
    """Label outside the range of its kind or head."""


class ArchError(SdrError):
    """Checkpoint architecture incompatible with the requested operation."""


class VersionError(SdrError):
    """Checkpoint written by an unknown format version."""


class InsufficientDataError(SdrError):
    """Too few participants or rows to run an experiment."""


class ManifestError(SdrError):
    """Dataset manifest with missing columns, duplicate ids or bad values."""
