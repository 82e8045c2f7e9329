"""Shared exception types.

ConfigError and DataError map to CLI exit code 2 (bad inputs), NumericError to
exit code 3 (non-finite values mid-run).
"""


class PoisonForgeError(Exception):
    pass


class ConfigError(PoisonForgeError):
    """Unparseable or constraint-violating configuration."""


class DataError(PoisonForgeError):
    """Bad dataset layout, corrupt artifact, or mismatched fingerprint."""


class NumericError(PoisonForgeError):
    """Non-finite loss or gradient encountered during optimization."""
