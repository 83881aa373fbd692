"""Exception types shared across the engine."""


class MaskcertError(Exception):
    """Base class for all engine errors."""


class TensorFormatError(MaskcertError):
    """Tensor file is malformed: bad magic, bad header, or truncated payload."""


class TensorValidationError(MaskcertError):
    """Tensor content violates an invariant (NaN/Inf, bad dtype, too many dims)."""


class ShapeError(MaskcertError):
    """Array shapes do not chain or do not match a declared layout."""


class BoundsError(MaskcertError):
    """A rectangle, patch, or window lies outside its container."""


class ConfigError(MaskcertError):
    """Invalid or inconsistent configuration."""


class ContractError(MaskcertError):
    """An operation was called outside its stated precondition."""
