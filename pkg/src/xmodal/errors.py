"""Exception hierarchy shared across the package."""


class XModalError(Exception):
    """Base class for all package errors."""


class ConfigError(XModalError, ValueError):
    """Invalid or unknown configuration values."""


class BackendError(XModalError, RuntimeError):
    """An encoder backend is unavailable or failed."""


class InputError(XModalError, ValueError):
    """Input has the wrong shape, kind or content."""


class DegenerateInputError(InputError):
    """Input is degenerate (zero vector, empty set, ...)."""


class CacheIntegrityError(XModalError):
    """A stored record does not match its manifest entry."""

    def __init__(self, key: str, reason: str):
        super().__init__(f"cache record {key!r}: {reason}")
        self.key = key


class LexiconError(XModalError, ValueError):
    """Lexicon or candidate harvesting failure."""


class TrainingError(XModalError, RuntimeError):
    """Training diverged or could not run."""

    def __init__(self, message: str, seed: int | None = None, step: int | None = None):
        super().__init__(f"{message} (seed={seed}, step={step})")
        self.seed = seed
        self.step = step


class TrendCheckError(XModalError):
    """A directional acceptance check did not hold."""
