"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class MiraError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(MiraError):
    """Bad configuration file or out-of-range value."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class ContractError(MiraError):
    """A provider answered, but the answer violates its contract."""


class TransportError(MiraError):
    """A provider could not be reached. Retryable."""


class ProviderError(MiraError):
    """Provider failure that the degradation policy cannot absorb."""


class CorruptIndexError(MiraError):
    """Index file failed its integrity checks."""


class RecordParseError(MiraError):
    """Serialized RTRA record is malformed."""
