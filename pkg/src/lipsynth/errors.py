"""Error taxonomy shared across the package.

ConfigError: invalid configuration or CLI usage (exit code 2).
DataError: unreadable, malformed or inconsistent input data (exit code 3).
Everything else surfaces as a runtime failure (exit code 4).
"""


class LipsynthError(Exception):
    pass


class ConfigError(LipsynthError):
    pass


class DataError(LipsynthError):
    pass


class ExternalToolError(LipsynthError):
    """A configured external command (vocoder, transcriber) failed."""
