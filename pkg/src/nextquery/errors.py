"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value is out of range, unknown, or inconsistent."""
