"""Exception types shared across the package."""


class PnpError(Exception):
    """Base class for all package errors."""


class ConfigError(PnpError):
    """Invalid configuration, shapes, file contents, or arguments."""


class GraphError(PnpError):
    """Malformed computation-graph request (e.g. bad truncation target)."""


class ContractError(PnpError):
    """A call violated an operation's contract (e.g. non-scalar loss)."""


class NumericError(PnpError):
    """Non-finite values appeared in a forward or backward pass."""
