"""Declarative run configuration and the content-addressed artifact store.

A run config is one YAML or JSON document with the sections ``dataset``,
``gan``, ``classifier``, ``attack``, ``finetune``, ``evaluation`` and ``io``.
Unknown keys are rejected. The config hash is the SHA-256 of the canonical
JSON form (sorted keys, no whitespace) of the fully resolved document.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .patch_ops import Placement, ThresholdConfig

ARTIFACT_ROOT_ENV = "TNTPATCH_ARTIFACT_ROOT"
DATA_ROOT_ENV = "TNTPATCH_DATA_ROOT"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    kind: Literal["cifar10", "gtsrb", "shapes10"] = "cifar10"
    root: Optional[str] = None
    n_train: int = Field(6000, ge=1)  # shapes10 only
    n_test: int = Field(2000, ge=1)  # shapes10 only
    split_seed: int = 0
    split_sizes: List[int] = [100, 1000]


class GanSection(_Section):
    data_dir: str = "builtin:flowers:256"
    output_size: int = 32
    latent_dim: int = Field(128, ge=1)
    width: int = Field(32, ge=1)
    lambda_gp: float = Field(10.0, ge=0)
    critic_steps_per_gen_step: int = Field(5, ge=1)
    batch_size: int = Field(64, ge=1)
    total_steps: int = Field(2000, ge=0)
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    hflip: bool = True
    seed: int = 0
    sample_every: int = Field(500, ge=0)
    checkpoint_every: int = Field(500, ge=0)


class ClassifierSection(_Section):
    arch: Literal["cifar10", "gtsrb"] = "cifar10"
    width: float = Field(0.25, gt=0)
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    augment: bool = False
    seed: int = 0


class AttackSection(_Section):
    mode: Literal["targeted", "untargeted"] = "targeted"
    target: Optional[Union[int, str]] = None
    lambda_balance: float = 1.0
    epsilon: float = Field(0.01, gt=0)
    n_iter: int = Field(20, ge=1)
    batch_size: int = Field(32, ge=1)
    tau_batch: float = Field(0.9, gt=0, le=1)
    tau_val: float = Field(0.9, gt=0, le=1)
    location: str = "lower_right"
    scale_fraction: float = Field(0.2, gt=0, le=1)
    val_location: Optional[str] = None
    threshold_mode: Literal["fixed", "otsu"] = "fixed"
    threshold: float = 0.1
    max_restarts: int = Field(50, ge=0)
    update_every: int = Field(1, ge=1)
    seed: int = 0
    search_split: str = "train"
    val_split: str = "split_1000"


class FinetuneSection(_Section):
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    max_steps: int = Field(2000, ge=0)
    scale_fraction: float = Field(0.05, gt=0, le=1)
    n_val_z: int = Field(8, ge=0)
    warm_start: bool = True
    stop_on_pass: bool = True
    seed: int = 0


class TransferModel(_Section):
    width: Optional[float] = None
    seed: Optional[int] = None
    epochs: Optional[int] = None


class EvaluationSection(_Section):
    splits: List[str] = ["split_100", "split_1000", "full"]
    locations: bool = True
    sizes: List[float] = [0.05, 0.1, 0.15, 0.2]
    baseline_n: int = Field(256, ge=2)
    baseline_kinds: List[Literal["color", "natural"]] = ["color", "natural"]
    baseline_split: str = "split_1000"
    sweep_split: str = "split_1000"
    transfer_models: List[TransferModel] = []
    plots: bool = True
    csv: bool = True


class IOSection(_Section):
    root: Optional[str] = None


class RunConfig(_Section):
    dataset: DatasetSection = DatasetSection()
    gan: GanSection = GanSection()
    classifier: ClassifierSection = ClassifierSection()
    attack: AttackSection = AttackSection()
    finetune: FinetuneSection = FinetuneSection()
    evaluation: EvaluationSection = EvaluationSection()
    io: IOSection = IOSection()

    # -- hashing -----------------------------------------------------------

    def canonical(self, *sections) -> str:
        d = self.model_dump(mode="json")
        if sections:
            d = {k: d[k] for k in sections}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self, *sections) -> str:
        """Digest of the whole document, or of just the named sections."""
        return hashlib.sha256(self.canonical(*sections).encode()).hexdigest()

    # -- typed views -------------------------------------------------------

    def threshold_cfg(self) -> ThresholdConfig:
        return ThresholdConfig(self.attack.threshold_mode, self.attack.threshold)

    def attack_placement(self) -> Placement:
        return Placement(self.attack.location, self.attack.scale_fraction)

    def artifact_root(self) -> Path:
        root = os.environ.get(ARTIFACT_ROOT_ENV) or self.io.root or "artifacts"
        return Path(root)


# artifacts and the config sections their content depends on; io and evaluation
# never change a trained artifact
ARTIFACT_SECTIONS = {
    "gan": ("gan",),
    "classifier": ("dataset", "classifier"),
    "tnt": ("dataset", "gan", "classifier", "attack"),
    "advgen": ("dataset", "gan", "classifier", "attack", "finetune"),
    "report": ("dataset", "gan", "classifier", "attack", "finetune", "evaluation"),
}


def _coerce(value: str):
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings on top of a raw config document."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} does not name a scalar key")
        node[parts[-1]] = _coerce(value)
    return doc


def load_config(path=None, overrides=()) -> RunConfig:
    """Read, override and validate a run config. Raises :class:`ConfigError`."""
    doc = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML/JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    doc = apply_overrides(doc, overrides)
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


class ArtifactStore:
    """Directory tree ``<root>/<kind>/<hash16>/`` with a ``latest`` symlink per kind."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, kind: str, cfg: RunConfig) -> Path:
        return self.root / kind / cfg.hash(*ARTIFACT_SECTIONS[kind])[:16]

    def path_for_hash(self, kind: str, digest: str) -> Path:
        return self.root / kind / digest[:16]

    def publish(self, kind: str, directory: Path):
        link = self.root / kind / "latest"
        try:
            if link.is_symlink() or link.exists():
                link.unlink()
            link.symlink_to(directory.name)
        except OSError:
            pass
