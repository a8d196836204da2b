"""Exception types raised across the package.

Everything user-facing derives from VLCacheError so the CLI can map any
expected failure to a single exit code.
"""


class VLCacheError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(VLCacheError):
    """A field of a spec, header, or argument is out of contract."""


class TraceFormatError(VLCacheError):
    """Trace file has a bad magic string or an unsupported version."""


class TraceTruncatedError(VLCacheError):
    """Trace payload is shorter (or longer) than the header implies."""


class TraceValueError(VLCacheError):
    """Trace payload contains non-finite values."""


class DegenerateSparsityError(VLCacheError):
    """Every layer is fully sparse; the budget split is undefined."""


class ZeroVarianceError(VLCacheError):
    """A sparsity curve is constant; correlation is undefined."""


class SpecTooLargeError(VLCacheError):
    """A benchmark spec needs more memory than the configured cap."""
