"""Exceptions shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration, scenario or file contents."""
