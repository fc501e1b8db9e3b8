"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments: bad dimensions, ranges, keys."""


class ProtocolError(RuntimeError):
    """Misuse of a round/aggregation protocol, e.g. an empty update list."""
