"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration (bad shapes, empty specs, unusable settings)."""


class InputError(ValueError):
    """Invalid runtime input to an operation."""


class ManifestError(ValueError):
    """Malformed or incomplete corpus manifest."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupted, or incompatible checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite; a diagnostic checkpoint was written."""
