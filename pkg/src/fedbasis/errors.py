"""Exception types shared across the package."""


class FedBasisError(Exception):
    """Base class for all package errors."""


class ConfigError(FedBasisError):
    """Invalid configuration value or malformed config document."""


class ShapeError(FedBasisError):
    """Dimension or block-structure mismatch between operands."""


class DataError(FedBasisError):
    """Unusable data: empty client set, degenerate class, bad file."""
