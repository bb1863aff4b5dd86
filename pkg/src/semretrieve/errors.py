"""Exception taxonomy shared across the package."""


class SemRetrieveError(Exception):
    """Base class for all package errors."""


class ConfigError(SemRetrieveError):
    """Invalid configuration value (bad cut, out-of-range knob, malformed config file)."""


class ContractViolation(SemRetrieveError):
    """A documented precondition was broken by the caller."""


class DimensionError(SemRetrieveError):
    """Shape-incompatible tensor inputs."""


class EncodeError(SemRetrieveError):
    """Text blob cannot be encoded (empty token set, unrepresentable characters)."""


class TrainingError(SemRetrieveError):
    """Non-finite loss or gradient surfaced during optimization."""


class OracleError(SemRetrieveError):
    """The relevance oracle could not label a (query, doc) pair; it must be total."""


class IndexFormatError(SemRetrieveError):
    """Corrupt, truncated, or wrong-magic index/artifact file."""


class VersionMismatchError(SemRetrieveError):
    """Artifact version chain broken (schema or tte id mismatch between steps)."""


class GuardrailError(SemRetrieveError):
    """A configured quality guardrail (e.g. minimum recall vs the exact oracle) failed."""
