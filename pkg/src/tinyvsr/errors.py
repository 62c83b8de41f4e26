"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit
with 2, numeric failures with 3.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad file schema, mismatched model/clip dims, etc."""


class DimensionError(ValueError):
    """Tensor shapes or grid extents do not satisfy an operation's contract."""


class NumericError(RuntimeError):
    """Non-finite values or a numerically singular configuration."""


class DegenerateMaskError(ValueError):
    """An attention mask row admits no keys at all."""
