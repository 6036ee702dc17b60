"""Exception types shared across the pipeline."""


class SepaRegError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SepaRegError):
    """A file on disk does not match its documented container format."""


class ValidationError(SepaRegError):
    """An in-memory value violates a documented invariant or precondition."""


class ConfigError(SepaRegError):
    """A run configuration is malformed or inconsistent. CLI exit code 2."""


class StageError(SepaRegError):
    """A pipeline stage failed at runtime. CLI exit code 3."""
