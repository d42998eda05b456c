"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Bad configuration or incompatible shapes/widths."""


class UsageError(ValueError):
    """An operation was called with arguments outside its contract."""


class FormatError(RuntimeError):
    """A file on disk does not match the expected binary/JSON format."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""


class IntegrityError(RuntimeError):
    """Stored references no longer match the data they point into."""


class GenerationError(RuntimeError):
    """A scripted generator failed to produce a valid trajectory."""
