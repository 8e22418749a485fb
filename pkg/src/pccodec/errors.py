"""Exception hierarchy shared across the codec."""


class CodecError(Exception):
    """Base class for all errors raised by this package."""


class EmptyCloud(CodecError):
    """Input point set is empty."""


class DepthTooSmall(CodecError):
    """Coordinates do not fit in the requested bit depth."""


class InvariantViolation(CodecError):
    """A structural invariant (sortedness, code range, ...) was broken."""


class ShapeError(CodecError):
    """Array shapes are inconsistent with the operation's contract."""


class ContractViolation(CodecError):
    """An operation was driven out of its required call order."""


class InvalidPmf(CodecError):
    """A probability vector is NaN/negative or far from normalized."""


class DecodeError(CodecError):
    """Bitstream could not be decoded consistently."""


class ParseError(CodecError):
    """Container framing is malformed."""


class ConfigError(CodecError):
    """Configuration or model/stream mismatch."""


class TrainingDiverged(CodecError):
    """Optimization produced a non-finite loss."""


class CacheTooLarge(CodecError):
    """Backbone feature cache exceeds the configured budget."""


class InvalidK(CodecError):
    """Requested reconstruction count is out of range."""


class InvalidAnchor(CodecError):
    """Anchor rate for relative-gain computation is not positive."""


class InvalidInput(CodecError):
    """Metric input is unusable (e.g. empty cloud)."""
