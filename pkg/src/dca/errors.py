"""Exception hierarchy shared across the toolkit.

Data/config problems and numeric failures are kept on separate branches so
the command-line layer can map them to distinct exit codes.
"""


class DCAError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DCAError):
    """Invalid configuration value or combination."""


class ProtocolError(DCAError):
    """Malformed incremental protocol (bad split sizes, phase index, ...)."""


class TemplateError(DCAError):
    """Prompt template does not contain exactly one placeholder."""


class CoverageError(DCAError):
    """An embedding table or classifier head is missing a required class."""


class FormatError(DCAError):
    """On-disk artifact does not match its documented schema."""


class UnknownClassError(DCAError):
    """Lookup of a class id that is not registered."""


class ShapeError(DCAError):
    """Array shape does not match the declared contract."""


class BoxError(DCAError):
    """Degenerate bounding box (non-positive width/height)."""


class NumericError(DCAError):
    """Non-finite value where a finite one is required."""
