class HTPError(Exception):
    """Base class for user-facing errors (CLI exit code 1)."""


class DataError(HTPError, ValueError):
    pass


class ConfigError(HTPError, ValueError):
    pass


class CheckpointError(HTPError):
    pass


class TrainingError(HTPError, RuntimeError):
    pass
