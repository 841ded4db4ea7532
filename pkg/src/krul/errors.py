"""Exception types shared across the package."""


class KrulError(Exception):
    pass


class ConfigError(KrulError, ValueError):
    pass


class RestorationGapError(KrulError):
    """Per-layer spans do not tile the history, or a hidden-state prefix is missing."""


class StateCorruptionError(KrulError):
    pass


class PlanInvalidError(KrulError, ValueError):
    pass


class ClassificationError(KrulError, ValueError):
    pass


class AccountingError(KrulError):
    pass


class SnapshotError(KrulError):
    pass


class LoadError(SnapshotError):
    """Raised by snapshot loading; ``field`` names the check that failed."""

    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)
