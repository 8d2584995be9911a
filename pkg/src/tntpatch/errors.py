"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (see :mod:`tntpatch.cli`).
"""


class TnTError(Exception):
    """Base class for all package errors."""


class ConfigError(TnTError, ValueError):
    pass


class ShapeError(TnTError, ValueError):
    pass


class EmptyPatch(TnTError):
    """Thresholding found no foreground pixel in a generated patch."""


class PlacementOverflow(TnTError, ValueError):
    pass


class DatasetEmpty(TnTError):
    pass


class DatasetSchemaError(TnTError, ValueError):
    pass


class DatasetMissing(TnTError, FileNotFoundError):
    pass


class NotConverged(TnTError):
    """Raised by orchestration code when a search exhausts its restart budget."""


class Diverged(TnTError):
    pass


class TrainingDiverged(Diverged):
    def __init__(self, message, last_good_checkpoint=None):
        super().__init__(message)
        self.last_good_checkpoint = last_good_checkpoint


class FinetuneDiverged(Diverged):
    pass
