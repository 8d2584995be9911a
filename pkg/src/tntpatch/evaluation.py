"""Measuring attack success: ASR cells, sweeps, transfer, random baselines.

All routines take a :class:`~tntpatch.classifiers.LabeledDataset` split and
a :class:`~tntpatch.patch_ops.Patch`, stamp the patch with a
:class:`~tntpatch.patch_ops.Placement`, and count fooled samples. Counts are
kept as integers so every reported ASR can be recomputed from the report.

Targeted mode excludes samples whose ground truth already is the target
label from the denominator.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import torch

from .classifiers import ClassifierHandle, LabeledDataset
from .errors import ConfigError, EmptyPatch, PlacementOverflow
from .patch_ops import (
    CANONICAL_LOCATIONS,
    Patch,
    Placement,
    ThresholdConfig,
    apply_patch_batch,
    compute_mask,
    footprint,
    remove_background,
)

log = logging.getLogger(__name__)

MODES = ("targeted", "untargeted")


@dataclass
class ReportCell:
    fooled: int = 0
    total: int = 0
    skipped: Optional[str] = None

    @property
    def asr(self) -> Optional[float]:
        if self.skipped or self.total == 0:
            return None
        return self.fooled / self.total

    def to_dict(self):
        d = {"fooled": self.fooled, "total": self.total, "asr": self.asr}
        if self.skipped:
            d["skipped"] = self.skipped
        return d


def _check_mode(mode, y_target):
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "targeted" and y_target is None:
        raise ConfigError("targeted mode needs y_target")


def fooled_mask(pred, labels, mode, y_target=None):
    """Per-sample ``(fooled, counted)`` boolean tensors."""
    if mode == "targeted":
        counted = labels != y_target
        return (pred == y_target) & counted, counted
    return pred != labels, torch.ones_like(labels, dtype=torch.bool)


def attack_success_rate(classifier: ClassifierHandle, split: LabeledDataset,
                        patch: Optional[Patch], placement: Placement = Placement(),
                        mode="untargeted", y_target=None, batch_size=500) -> ReportCell:
    """Count fooled samples when ``patch`` is stamped on every image of ``split``.

    ``patch=None`` evaluates the clean split, giving the baseline error (or
    baseline target rate) of the classifier.
    """
    _check_mode(mode, y_target)
    if len(split) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    fooled = total = 0
    for x, y in split.batches(batch_size, classifier.dtype):
        if patch is not None:
            x = apply_patch_batch(x, patch, placement)
        pred = classifier.argmax(x)
        f, c = fooled_mask(pred, y, mode, y_target)
        fooled += int(f.sum())
        total += int(c.sum())
    return ReportCell(fooled, total)


def _map(fn, items, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def canonical_placements(scale_fraction=None):
    return [Placement(loc, scale_fraction) for loc in CANONICAL_LOCATIONS]


def location_sweep(classifier, split, patch: Patch, locations: Sequence[Placement],
                   mode="untargeted", y_target=None, workers=1) -> Dict[str, ReportCell]:
    """ASR per placement, keyed by placement name. Overflowing rows are skipped."""
    h, w = classifier.input_size

    def cell(pl):
        try:
            footprint(*patch.size, pl, h, w)
        except PlacementOverflow as exc:
            return ReportCell(skipped=f"overflow: {exc}")
        return attack_success_rate(classifier, split, patch, pl, mode, y_target)

    cells = _map(cell, list(locations), workers)
    return {pl.name: c for pl, c in zip(locations, cells)}


def spread(table: Dict[str, ReportCell]) -> float:
    """max - min ASR over the non-skipped rows."""
    vals = [c.asr for c in table.values() if c.asr is not None]
    return max(vals) - min(vals) if vals else float("nan")


def transfer_matrix(patches_by_source: Dict[str, Patch], target_models: Dict[str, ClassifierHandle],
                    split: Union[LabeledDataset, Dict[str, LabeledDataset]],
                    placement: Placement = Placement(), workers=1):
    """Untargeted ASR of each source model's patch on each target model.

    ``split`` may be one dataset or a per-target mapping. When the placement
    has no ``scale_fraction`` and a target's input size differs from the
    source model's, the patch is rescaled to cover the same area fraction.
    """
    if len(target_models) < 1:
        raise ConfigError("transfer needs at least one target model")
    keys = [(s, t) for s in patches_by_source for t in target_models]

    def cell(key):
        src, tgt = key
        clf = target_models[tgt]
        data = split[tgt] if isinstance(split, dict) else split
        pl = placement
        src_clf = target_models.get(src)
        if pl.scale_fraction is None and src_clf is not None and src_clf.input_size != clf.input_size:
            ph, pw = patches_by_source[src].size
            frac = min(1.0, ph * pw / (src_clf.input_size[0] * src_clf.input_size[1]))
            pl = pl.with_scale(frac)
            log.info("rescaling %s patch for %s (%s -> %s)", src, tgt, src_clf.input_size, clf.input_size)
        return attack_success_rate(clf, data, patches_by_source[src], pl, "untargeted")

    cells = _map(cell, keys, workers)
    out: Dict[str, Dict[str, ReportCell]] = {s: {} for s in patches_by_source}
    for (s, t), c in zip(keys, cells):
        out[s][t] = c
    return out


@dataclass
class BaselineStats:
    kind: str
    n: int
    mean: float
    std: float
    asrs: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def color_patch(rgb, size):
    h, w = size
    delta = np.broadcast_to(np.asarray(rgb, np.float64), (h, w, 3)).copy()
    return Patch(delta, np.ones((h, w), np.uint8), "external_file", {"rgb": list(map(float, rgb))})


def random_patch_baseline(classifier, split, kind="color", n=256, placement: Placement = Placement(),
                          natural_images=None, seed=0, patch_size=(16, 16),
                          threshold_cfg: Optional[ThresholdConfig] = ThresholdConfig(),
                          workers=1) -> BaselineStats:
    """Untargeted ASR statistics over ``n`` random patches.

    ``kind="color"`` draws uniform solid RGB squares. ``kind="natural"`` draws
    images from ``natural_images`` (``(N, H, W, 3)`` floats, e.g. the GAN's
    training corpus) and removes their background with the same thresholding
    used for generated patches; pass ``threshold_cfg=None`` to stamp the full
    rectangle instead. The split is held fixed; only the patch varies.
    """
    if n < 2:
        raise ConfigError("need n >= 2 patches for a standard deviation")
    rng = np.random.default_rng(seed)
    if kind == "color":
        patches = [color_patch(rng.uniform(0, 1, 3), patch_size) for _ in range(n)]
    elif kind == "natural":
        if natural_images is None or len(natural_images) == 0:
            raise ConfigError("natural baseline needs an image folder")
        natural_images = np.asarray(natural_images, dtype=np.float64)
        picks = rng.integers(0, len(natural_images), n)
        patches = []
        for i in picks:
            img = natural_images[i]
            mask = np.ones(img.shape[:2], np.uint8)
            if threshold_cfg is not None:
                try:
                    mask = compute_mask(img, threshold_cfg)
                except EmptyPatch:
                    pass
            patches.append(remove_background(Patch(img, mask, "external_file", {"index": int(i)})))
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")

    cells = _map(lambda p: attack_success_rate(classifier, split, p, placement, "untargeted"),
                 patches, workers)
    asrs = [c.asr for c in cells]
    return BaselineStats(kind, n, float(np.mean(asrs)), float(np.std(asrs, ddof=1)), asrs)


def size_sweep(classifier, split, patch_source: Union[Patch, Callable[[float], Patch]],
               sizes: Sequence[float], mode="untargeted", y_target=None,
               location="lower_right", workers=1) -> Dict[float, ReportCell]:
    """ASR as a function of patch area fraction.

    A :class:`Patch` is rescaled to each size; a callable is asked for a fresh
    patch at each size (it receives the fraction). Sizes that shrink the patch
    below 2x2 pixels are skipped.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ConfigError("sizes must be sorted ascending")
    h, w = classifier.input_size

    def cell(frac):
        side = math.sqrt(frac * h * w)
        if side < 2:
            return ReportCell(skipped=f"patch below 2x2 at fraction {frac}")
        p = patch_source(frac) if callable(patch_source) else patch_source
        pl = Placement(location, frac)
        return attack_success_rate(classifier, split, p, pl, mode, y_target)

    cells = _map(cell, sizes, workers)
    return dict(zip(sizes, cells))


def make_splits(dataset: LabeledDataset, sizes=(100, 1000), seed=0) -> Dict[str, LabeledDataset]:
    """Nested seeded subsamples plus the full set: ``split_100 ⊂ split_1000 ⊂ full``."""
    perm = np.random.default_rng(seed).permutation(len(dataset))
    out = {}
    for s in sizes:
        if s <= len(dataset):
            out[f"split_{s}"] = dataset.subset(np.sort(perm[:s]), f"{dataset.name}/split_{s}")
    out["full"] = dataset
    return out


# -- reports --------------------------------------------------------------------


@dataclass
class EvaluationReport:
    task: str
    classifiers: list
    patches: list
    mode: str
    config_hash: str
    seeds: dict = field(default_factory=dict)
    target_label: Optional[int] = None
    splits: dict = field(default_factory=dict)
    locations: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    transfer: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    annotations: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)  # wall time, timestamps: excluded from comparisons

    def to_dict(self, include_metadata=True):
        def cells(d):
            if isinstance(d, ReportCell):
                return d.to_dict()
            if isinstance(d, BaselineStats):
                return d.to_dict()
            if isinstance(d, dict):
                return {str(k): cells(v) for k, v in d.items()}
            return d

        out = {
            "task": self.task,
            "classifiers": self.classifiers,
            "patches": self.patches,
            "mode": self.mode,
            "target_label": self.target_label,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "splits": cells(self.splits),
            "locations": cells(self.locations),
            "sizes": cells(self.sizes),
            "transfer": cells(self.transfer),
            "baselines": cells(self.baselines),
            "annotations": self.annotations,
        }
        if include_metadata:
            out["metadata"] = self.metadata
        return out

    def counts(self):
        """Everything except metadata, for reproducibility comparisons."""
        return self.to_dict(include_metadata=False)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_jsonable)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text + "\n")
        return text

    def to_csv(self, directory) -> list:
        """Flatten each table into ``<directory>/<table>.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        d = self.to_dict()
        for table in ("splits", "locations", "sizes"):
            rows = _flatten(d[table])
            if rows:
                written.append(_write_csv(directory / f"{table}.csv", rows))
        if d["transfer"]:
            rows = []
            for src, row in d["transfer"].items():
                for tgt, c in row.items():
                    rows.append({"source": src, "target": tgt, **c})
            written.append(_write_csv(directory / "transfer.csv", rows))
        if d["baselines"]:
            rows = [{"key": k, "kind": v["kind"], "n": v["n"], "mean": v["mean"], "std": v["std"]}
                    for k, v in d["baselines"].items()]
            written.append(_write_csv(directory / "baselines.csv", rows))
        return written


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o)}")


def _flatten(table, prefix=()):
    rows = []
    for k, v in table.items():
        if isinstance(v, dict) and "fooled" in v:
            rows.append({"key": "/".join(prefix + (str(k),)), **v})
        elif isinstance(v, dict):
            rows.extend(_flatten(v, prefix + (str(k),)))
    return rows


def _write_csv(path, rows):
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    return path


def plot_size_curves(curves: Dict[str, Dict[float, ReportCell]], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, curve in curves.items():
        xs = [100 * float(s) for s, c in curve.items() if c.asr is not None]
        ys = [100 * c.asr for c in curve.values() if c.asr is not None]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xlabel("patch area (% of image)")
    ax.set_ylabel("ASR (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_location_table(table: Dict[str, ReportCell], path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = {
        "upper_left": (0, 0), "top": (0, 1), "upper_right": (0, 2),
        "left": (1, 0), "center": (1, 1), "right": (1, 2),
        "lower_left": (2, 0), "bottom": (2, 1), "lower_right": (2, 2),
    }
    vals = np.full((3, 3), np.nan)
    for name, c in table.items():
        if name in grid and c.asr is not None:
            vals[grid[name]] = 100 * c.asr
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.imshow(vals, vmin=0, vmax=100, cmap="viridis")
    for (r, col), v in np.ndenumerate(vals):
        if not np.isnan(v):
            ax.text(col, r, f"{v:.1f}", ha="center", va="center", color="w")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
