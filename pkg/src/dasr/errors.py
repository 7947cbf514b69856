"""Exception hierarchy.

Three top-level families map onto distinct CLI exit codes: configuration
problems (bad flags, malformed graphs), I/O problems (unreadable or corrupt
files), and data problems (inputs that parse but violate a contract).
"""


class DasrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(DasrError):
    """Invalid configuration: bad flag values, graph structure, shapes."""


class IOFormatError(DasrError):
    """A file could not be read or does not match its declared format."""


class DataError(DasrError):
    """Well-formed input that violates a runtime contract."""


# model container / graph file
class BadMagicError(IOFormatError):
    pass


class VersionMismatchError(IOFormatError):
    pass


class TruncatedPayloadError(IOFormatError):
    pass


class DuplicateTensorError(IOFormatError):
    pass


class UnresolvedRefError(ConfigError):
    """A graph references a tensor or layer name that does not exist."""


class GraphCycleError(ConfigError):
    pass


class UnknownLayerKindError(ConfigError):
    pass


class ShapeMismatchError(ConfigError):
    """Layer input/output shapes are inconsistent; message names the layer."""


class EmptyRegionError(DataError):
    """No pixel of a probability map reached the threshold."""
