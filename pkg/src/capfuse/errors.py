"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not conform for the requested operation."""


class ConfigError(ValueError):
    """A configuration value is out of its legal range or inconsistent."""


class InputError(ValueError):
    """Caller-supplied data violates an operation's preconditions."""


class StateError(RuntimeError):
    """An object is in the wrong state for the requested operation."""


class NumericError(ArithmeticError):
    """A computation produced or encountered a non-finite value."""


class ParseError(ValueError):
    """A serialized artifact could not be parsed."""


class CheckpointError(RuntimeError):
    """A checkpoint failed validation (version, checksum, or flags)."""
