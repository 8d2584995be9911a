"""Naturalistic adversarial patches: generator training, latent search,
generator fine-tuning and evaluation against image classifiers."""

from .errors import (
    ConfigError,
    DatasetEmpty,
    DatasetMissing,
    DatasetSchemaError,
    Diverged,
    EmptyPatch,
    FinetuneDiverged,
    NotConverged,
    PlacementOverflow,
    ShapeError,
    TnTError,
    TrainingDiverged,
)
from .patch_ops import Patch, Placement, ThresholdConfig, load_patch, make_patch, place, save_patch, stamp

__version__ = "0.1.0"
