"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, data/format
problems -> 3, numeric failures -> 4.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class FormatError(ValueError):
    """A file on disk does not follow its documented layout."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class EmptySetError(ValueError):
    """A reduction was asked for over an empty point set."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the pipeline requires finite math."""
