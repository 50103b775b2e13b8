"""Exception hierarchy shared by every module."""


class BlockspecError(Exception):
    """Base class for all package errors."""


class ShapeError(BlockspecError):
    """Operands have incompatible shapes."""


class NumericError(BlockspecError):
    """A forward op produced NaN/Inf, or training diverged."""


class ContractError(BlockspecError):
    """A caller violated an API precondition (cache desync, missing grad, ...)."""


class ConfigError(BlockspecError):
    """Invalid configuration (bounds, empty corpus, width mismatch, ...)."""
