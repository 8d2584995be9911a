import numpy as np
import pytest
import torch

from tntpatch.classifiers import ArchSpec, ClassifierHandle, Layer, LabeledDataset, build_network
from tntpatch.gan_training import build_generator


def tiny_arch(num_classes=4, size=8):
    layers = (
        Layer("conv", 4, 3, 1, "relu"),
        Layer("maxpool", 0, 2, 2, "none"),
        Layer("fc", 8, 0, 0, "relu"),
        Layer("fc", num_classes, 0, 0, "none"),
    )
    return ArchSpec("tiny", layers, num_classes, (size, size))


def tiny_classifier(num_classes=4, size=8, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    net = build_network(tiny_arch(num_classes, size)).to(dtype)
    return ClassifierHandle(net, num_classes, (size, size), (0.5,) * 3, (0.25,) * 3)


def tiny_generator(latent_dim=6, size=8, width=4, seed=0, dtype=torch.float64):
    g = build_generator(latent_dim, size, width, seed)
    g.module.to(dtype)
    return g


def random_dataset(n=40, size=8, num_classes=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    imgs = torch.randint(0, 256, (n, 3, size, size), generator=g, dtype=torch.uint8)
    labels = torch.arange(n) % num_classes
    return LabeledDataset(imgs, labels, tuple(f"c{i}" for i in range(num_classes)), "random")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def artifact_root(tmp_path, monkeypatch):
    root = tmp_path / "store"
    monkeypatch.setenv("TNTPATCH_ARTIFACT_ROOT", str(root))
    return root
