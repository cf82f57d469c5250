"""Shared exception types."""


class StateError(RuntimeError):
    """An operation was applied to an object in a state that forbids it."""


class ConfigError(ValueError):
    """An experiment config failed validation. Carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
