"""Exception hierarchy shared across the package."""


class ReedError(Exception):
    """Base class for all package errors."""


class ConfigError(ReedError, ValueError):
    pass


class ShapeError(ReedError, ValueError):
    pass


class DatasetNotFound(ReedError, FileNotFoundError):
    pass


class EmptyDataset(ReedError, ValueError):
    pass


class SplitError(ReedError, ValueError):
    pass


class MetricError(ReedError, ValueError):
    pass


class DegenerateReference(ReedError, ValueError):
    """Reference image has (numerically) no energy above the cutoff radius."""


class TrainingDiverged(ReedError, RuntimeError):
    pass


class SpecError(ReedError, ValueError):
    """Invalid pixel-space edit specification."""


class ReportError(ReedError, ValueError):
    pass


class CheckpointIOError(ReedError, OSError):
    pass


class ChecksumError(ReedError, ValueError):
    pass


class VersionError(ReedError, ValueError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected
