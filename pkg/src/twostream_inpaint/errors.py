"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A module was built with inconsistent or unsupported settings."""


class InputError(ValueError):
    """Runtime inputs violate an operation's contract (shape, range, finiteness)."""


class MaskGenerationError(RuntimeError):
    """Mask generation could not hit the requested hole-ratio bin."""


class TrainingError(RuntimeError):
    """Training aborted (non-finite or diverging loss); message names the term."""


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable, truncated, or of an incompatible version."""
