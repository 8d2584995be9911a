"""Target classifiers: architecture tables, training, and a uniform adapter.

Every model is wrapped in a :class:`ClassifierHandle` that accepts raw
``[0, 1]`` pixel batches ``(N, 3, H, W)`` and applies its own per-channel
normalization, so attack code never has to know about it.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import corpus
from .errors import DatasetMissing, DatasetSchemaError, ShapeError
from .gan_training import parameter_hash

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tntpatch.classifier"
CHECKPOINT_VERSION = 1

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
GTSRB_MEAN = (0.3403, 0.3121, 0.3214)
GTSRB_STD = (0.2724, 0.2608, 0.2669)
CIFAR10_LABELS = (
    "airplane", "car", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
)


@dataclass(frozen=True)
class Layer:
    type: str  # conv | maxpool | fc
    channels: int
    filter: Optional[int] = None
    stride: Optional[int] = None
    activation: Optional[str] = None


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: tuple
    num_classes: int
    input_size: tuple = (32, 32)

    def __post_init__(self):
        if not self.layers or self.layers[-1].type != "fc":
            raise ValueError("architecture must end with a fully connected layer")
        if self.layers[-1].channels != self.num_classes:
            raise ValueError("final layer width must equal num_classes")
        for layer in self.layers:
            if layer.type not in ("conv", "maxpool", "fc"):
                raise ValueError(f"unknown layer type {layer.type!r}")

    def to_dict(self):
        return {
            "name": self.name,
            "layers": [asdict(l) for l in self.layers],
            "num_classes": self.num_classes,
            "input_size": list(self.input_size),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], tuple(Layer(**l) for l in d["layers"]), d["num_classes"],
                   tuple(d["input_size"]))


def _vgg_block(chans):
    out = []
    for c in chans:
        if c == "M":
            out.append(Layer("maxpool", out[-1].channels, 2, 2))
        else:
            out.append(Layer("conv", c, 3, 1, "relu"))
    return out


def cifar10_arch(num_classes=10) -> ArchSpec:
    layers = _vgg_block([128, 128, "M", 256, 256, "M", 512, 512, "M"])
    layers += [Layer("fc", 1024, activation="relu"), Layer("fc", num_classes, activation="softmax")]
    return ArchSpec("cifar10", tuple(layers), num_classes)


def gtsrb_arch(num_classes=43) -> ArchSpec:
    layers = _vgg_block([128, 128, "M", 256, 256, "M", 512, 512, "M", 1024, "M"])
    layers += [Layer("fc", 1024, activation="relu"), Layer("fc", num_classes, activation="softmax")]
    return ArchSpec("gtsrb", tuple(layers), num_classes)


ARCHS = {"cifar10": cifar10_arch, "gtsrb": gtsrb_arch}


def build_network(arch: ArchSpec, width: float = 1.0) -> nn.Sequential:
    """Instantiate ``arch`` with every hidden width multiplied by ``width``.

    Convolutions use padding 1 so each 3x3 layer keeps the spatial size and
    only the pooling layers shrink it. The final softmax is left to the
    adapter; the network emits logits.
    """
    mods = []
    c_in, (h, w) = 3, arch.input_size
    flat = None
    for i, layer in enumerate(arch.layers):
        last = i == len(arch.layers) - 1
        if layer.type == "conv":
            c_out = max(1, int(round(layer.channels * width)))
            pad = layer.filter // 2
            mods += [nn.Conv2d(c_in, c_out, layer.filter, layer.stride, pad), nn.ReLU(inplace=True)]
            h = (h + 2 * pad - layer.filter) // layer.stride + 1
            w = (w + 2 * pad - layer.filter) // layer.stride + 1
            c_in = c_out
        elif layer.type == "maxpool":
            mods.append(nn.MaxPool2d(layer.filter, layer.stride))
            h, w = h // layer.stride, w // layer.stride
        else:
            if flat is None:
                mods.append(nn.Flatten())
                flat = c_in * h * w
                c_in = flat
            c_out = layer.channels if last else max(1, int(round(layer.channels * width)))
            mods.append(nn.Linear(c_in, c_out))
            if not last:
                mods.append(nn.ReLU(inplace=True))
            c_in = c_out
    return nn.Sequential(*mods)


class ClassifierHandle:
    """Differentiable classifier over raw pixel batches.

    ``module`` maps normalized inputs to logits; ``mean``/``std`` are the
    per-channel normalization constants applied inside :meth:`logits`.
    """

    def __init__(self, module, num_classes, input_size=(32, 32), mean=(0.5, 0.5, 0.5),
                 std=(0.5, 0.5, 0.5), label_names=None, meta=None):
        self.module = module.eval()
        self.num_classes = int(num_classes)
        self.input_size = tuple(input_size)
        self.mean = tuple(float(m) for m in mean)
        self.std = tuple(float(s) for s in std)
        self.label_names = list(label_names) if label_names else [str(i) for i in range(num_classes)]
        self.meta = dict(meta or {})

    def __repr__(self):
        return f"ClassifierHandle({self.meta.get('arch', '?')}, classes={self.num_classes})"

    @property
    def dtype(self):
        try:
            return next(self.module.parameters()).dtype
        except StopIteration:
            return torch.float32

    def double(self):
        """Copy of this handle in float64, for gradient checks."""
        return ClassifierHandle(copy.deepcopy(self.module).double(), self.num_classes,
                                self.input_size, self.mean, self.std, self.label_names, self.meta)

    def label_index(self, label):
        if isinstance(label, str):
            try:
                return self.label_names.index(label)
            except ValueError:
                raise KeyError(f"unknown label {label!r}") from None
        return int(label)

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != self.input_size:
            raise ShapeError(
                f"expected a (N, 3, {self.input_size[0]}, {self.input_size[1]}) batch, "
                f"got {tuple(x.shape)}"
            )

    def logits(self, x):
        self._check(x)
        mean = x.new_tensor(self.mean).view(1, 3, 1, 1)
        std = x.new_tensor(self.std).view(1, 3, 1, 1)
        return self.module((x - mean) / std)

    def log_probabilities(self, x):
        return F.log_softmax(self.logits(x), dim=1)

    def probabilities(self, x):
        with torch.no_grad():
            return F.softmax(self.logits(x), dim=1)

    def argmax(self, x):
        with torch.no_grad():
            return self.logits(x).argmax(dim=1)

    def input_gradient(self, x, labels, loss="cross_entropy"):
        """Gradient of the summed per-sample loss with respect to the pixels."""
        x = x.detach().clone().requires_grad_(True)
        logits = self.logits(x)
        labels = torch.as_tensor(labels).long().expand(x.shape[0])
        if loss == "cross_entropy":
            value = F.cross_entropy(logits, labels, reduction="sum")
        elif loss == "logit":
            value = logits.gather(1, labels[:, None]).sum()
        else:
            raise ValueError(f"unknown loss {loss!r}")
        grad, = torch.autograd.grad(value, x)
        return grad

    def parameter_hash(self) -> str:
        return parameter_hash(self.module)


# -- datasets -------------------------------------------------------------------


@dataclass
class LabeledDataset:
    """Images stored as uint8 ``(N, 3, H, W)`` with integer labels."""

    images: torch.Tensor
    labels: torch.Tensor
    label_names: Sequence[str] = ()
    name: str = ""
    indices: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.dtype != torch.uint8:
            raise TypeError("LabeledDataset stores uint8 images; use from_float")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError("images and labels disagree on length")
        self.labels = self.labels.long()

    def __len__(self):
        return int(self.labels.shape[0])

    @classmethod
    def from_float(cls, images, labels, label_names=(), name=""):
        images = torch.as_tensor(images)
        u8 = torch.round(images.clamp(0, 1) * 255).to(torch.uint8)
        return cls(u8, torch.as_tensor(labels), tuple(label_names), name)

    def get(self, idx=None, dtype=torch.float32):
        imgs = self.images if idx is None else self.images[idx]
        return imgs.to(dtype) / 255.0

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        parent = self.indices if self.indices is not None else np.arange(len(self))
        return LabeledDataset(self.images[idx], self.labels[idx], self.label_names,
                              name or self.name, parent[idx])

    def batches(self, batch_size, dtype=torch.float32):
        for start in range(0, len(self), batch_size):
            sl = slice(start, start + batch_size)
            yield self.get(sl, dtype), self.labels[sl]


def load_cifar10(root, train=False) -> LabeledDataset:
    """Load the python-pickle CIFAR-10 release found under ``root``.

    ``root`` is the directory containing ``cifar-10-batches-py`` (or that
    directory itself). Nothing is downloaded.
    """
    import pickle

    root = Path(root)
    base = root if (root / "batches.meta").exists() else root / "cifar-10-batches-py"
    files = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    if not all((base / f).exists() for f in files):
        raise DatasetMissing(f"CIFAR-10 python batches not found under {root}")
    data, labels = [], []
    for f in files:
        with open(base / f, "rb") as fh:
            d = pickle.load(fh, encoding="latin1")
        data.append(np.asarray(d["data"], np.uint8).reshape(-1, 3, 32, 32))
        labels.extend(d["labels"])
    return LabeledDataset(torch.from_numpy(np.concatenate(data)), torch.tensor(labels),
                          CIFAR10_LABELS, "cifar10-" + ("train" if train else "test"))


def load_gtsrb(root, train=False, size=32) -> LabeledDataset:
    """Load GTSRB in the torchvision folder layout, resized to ``size`` pixels."""
    from torchvision.datasets import GTSRB

    try:
        ds = GTSRB(str(root), split="train" if train else "test", download=False)
    except RuntimeError as exc:
        raise DatasetMissing(f"GTSRB not found under {root}: {exc}") from exc
    from PIL import Image

    imgs, labels = [], []
    for path, label in ds._samples:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            imgs.append(np.asarray(im, np.uint8).transpose(2, 0, 1))
        labels.append(label)
    log.info("loaded %d GTSRB %s images", len(labels), "train" if train else "test")
    return LabeledDataset(torch.from_numpy(np.stack(imgs)), torch.tensor(labels),
                          tuple(str(i) for i in range(43)), "gtsrb-" + ("train" if train else "test"))


def load_shapes10(n, seed=0, size=32) -> LabeledDataset:
    images, labels = corpus.shapes10(n, size, seed)
    return LabeledDataset(torch.from_numpy(images), torch.from_numpy(labels),
                          corpus.SHAPES10_LABELS, f"shapes10-{seed}")


def channel_stats(dataset: LabeledDataset):
    x = dataset.get()
    return tuple(x.mean(dim=(0, 2, 3)).tolist()), tuple(x.std(dim=(0, 2, 3)).tolist())


# -- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    width: float = 1.0
    augment: bool = False
    seed: int = 0
    mean: tuple = CIFAR10_MEAN
    std: tuple = CIFAR10_STD


def _augment(x, gen):
    # random horizontal flip + 4-pixel padded random crop
    n, _, h, w = x.shape
    flip = torch.rand(n, generator=gen) < 0.5
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    padded = F.pad(x, (4, 4, 4, 4), mode="reflect")
    dy = torch.randint(0, 9, (n,), generator=gen)
    dx = torch.randint(0, 9, (n,), generator=gen)
    rows = (dy.view(-1, 1) + torch.arange(h)).view(n, 1, h, 1).expand(n, 3, h, w + 8)
    x = padded.gather(2, rows)
    cols = (dx.view(-1, 1) + torch.arange(w)).view(n, 1, 1, w).expand(n, 3, h, w)
    return x.gather(3, cols)


def accuracy(clf: ClassifierHandle, dataset: LabeledDataset, batch_size=500) -> float:
    correct = 0
    for x, y in dataset.batches(batch_size, clf.dtype):
        correct += int((clf.argmax(x) == y).sum())
    return correct / max(1, len(dataset))


def train_classifier(arch: ArchSpec, dataset: LabeledDataset, cfg: TrainConfig = TrainConfig(),
                     test_set: Optional[LabeledDataset] = None, label_names=None) -> ClassifierHandle:
    """Train with Adam and cross-entropy; records clean test accuracy in ``meta``."""
    if len(dataset) == 0:
        raise DatasetSchemaError("empty training set")
    lo, hi = int(dataset.labels.min()), int(dataset.labels.max())
    if lo < 0 or hi >= arch.num_classes:
        raise DatasetSchemaError(
            f"labels span [{lo}, {hi}] but {arch.name} has {arch.num_classes} classes"
        )
    if tuple(dataset.images.shape[-2:]) != tuple(arch.input_size):
        raise ShapeError(f"images are {tuple(dataset.images.shape[-2:])}, arch wants {arch.input_size}")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    module = build_network(arch, cfg.width)
    clf = ClassifierHandle(module, arch.num_classes, arch.input_size, cfg.mean, cfg.std,
                           label_names or dataset.label_names or None)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.lr)
    n = len(dataset)
    for epoch in range(cfg.epochs):
        module.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x = dataset.get(idx)
            if cfg.augment:
                x = _augment(x, gen)
            loss = F.cross_entropy(clf.logits(x), dataset.labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, total / n)
    module.eval()
    clf.meta.update(arch=arch.to_dict(), train=asdict(cfg), train_size=n)
    if test_set is not None:
        clf.meta["clean_accuracy"] = accuracy(clf, test_set)
        clf.meta["test_size"] = len(test_set)
    return clf


def save_classifier(path, clf: ClassifierHandle) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "state_dict": clf.module.state_dict(),
            "arch": clf.meta.get("arch"),
            "width": clf.meta.get("train", {}).get("width", 1.0),
            "num_classes": clf.num_classes,
            "input_size": list(clf.input_size),
            "mean": list(clf.mean),
            "std": list(clf.std),
            "label_names": clf.label_names,
            "clean_accuracy": clf.meta.get("clean_accuracy"),
            "meta": clf.meta,
        },
        path,
    )
    return path


def load_classifier(path) -> ClassifierHandle:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a classifier checkpoint")
    arch = ArchSpec.from_dict(ckpt["arch"])
    module = build_network(arch, ckpt["width"])
    module.load_state_dict(ckpt["state_dict"])
    meta = dict(ckpt.get("meta") or {})
    meta.setdefault("checkpoint", str(path))
    return ClassifierHandle(module, ckpt["num_classes"], ckpt["input_size"], ckpt["mean"],
                            ckpt["std"], ckpt["label_names"], meta)


class FunctionClassifier(ClassifierHandle):
    """Adapter around a plain ``logits = fn(x)`` callable.

    Useful for oracle classifiers in tests and for plugging in external
    models that already handle their own normalization.
    """

    def __init__(self, fn, num_classes, input_size=(32, 32), label_names=None, meta=None):
        super().__init__(nn.Identity(), num_classes, input_size, (0.0,) * 3, (1.0,) * 3,
                         label_names, meta)
        self.fn = fn

    def logits(self, x):
        self._check(x)
        return self.fn(x)

    def double(self):
        return self

    def parameter_hash(self):
        return "function:" + getattr(self.fn, "__name__", repr(self.fn))


def constant_classifier(label, num_classes=10, input_size=(32, 32), margin=50.0):
    """Oracle that predicts ``label`` with probability ~1 whatever the input."""

    def fn(x):
        out = x.new_zeros(x.shape[0], num_classes)
        out[:, label] = margin
        # keep a dependency on x so gradients exist (and are zero)
        return out + 0.0 * x.sum(dim=(1, 2, 3))[:, None]

    fn.__name__ = f"constant_{label}"
    return FunctionClassifier(fn, num_classes, input_size)
