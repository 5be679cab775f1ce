"""Exception hierarchy shared across the package."""


class FTLError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FTLError, ValueError):
    pass


class ParameterError(FTLError, ValueError):
    pass


class DomainError(FTLError, ValueError):
    pass


class ContractError(FTLError, RuntimeError):
    pass


class DegenerateBatchError(FTLError, ValueError):
    pass


class FormatError(FTLError, ValueError):
    """Malformed on-disk data (IDX files, dataset directories)."""


class CheckpointError(FTLError, ValueError):
    """Unreadable, truncated or incompatible checkpoint file."""


class ConfigError(FTLError, ValueError):
    pass
