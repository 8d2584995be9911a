import pickle

import numpy as np
import pytest
import torch

from tntpatch.classifiers import (
    ARCHS,
    CIFAR10_LABELS,
    ArchSpec,
    ClassifierHandle,
    LabeledDataset,
    Layer,
    TrainConfig,
    accuracy,
    build_network,
    cifar10_arch,
    constant_classifier,
    gtsrb_arch,
    load_cifar10,
    load_classifier,
    load_shapes10,
    save_classifier,
    train_classifier,
)
from tntpatch.errors import DatasetMissing, DatasetSchemaError, ShapeError

from conftest import random_dataset, tiny_arch, tiny_classifier


def test_cifar_layer_table():
    arch = cifar10_arch()
    kinds = [(l.type, l.channels) for l in arch.layers]
    assert kinds == [
        ("conv", 128), ("conv", 128), ("maxpool", 128), ("conv", 256), ("conv", 256),
        ("maxpool", 256), ("conv", 512), ("conv", 512), ("maxpool", 512), ("fc", 1024), ("fc", 10),
    ]
    assert all(l.filter == 3 for l in arch.layers if l.type == "conv")


def test_gtsrb_layer_table():
    arch = gtsrb_arch()
    assert [l.channels for l in arch.layers if l.type == "conv"] == [128, 128, 256, 256, 512, 512, 1024]
    assert arch.layers[-1].channels == 43 == arch.num_classes


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchSpec("bad", (Layer("fc", 5),), 10)
    with pytest.raises(ValueError):
        ArchSpec("bad", (Layer("conv", 4, 3, 1),), 4)
    spec = cifar10_arch()
    assert ArchSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("name", sorted(ARCHS))
def test_registered_archs_forward(name):
    arch = ARCHS[name]()
    net = build_network(arch, width=0.0625)
    out = net(torch.zeros(2, 3, *arch.input_size))
    assert out.shape == (2, arch.num_classes)


def test_probabilities_contract():
    clf = tiny_classifier()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64).repeat(4, 1, 1, 1)
    p = clf.probabilities(x)
    assert torch.allclose(p.sum(1), torch.ones(4, dtype=p.dtype), atol=1e-5)
    assert all(torch.equal(p[0], p[i]) for i in range(4))
    assert torch.equal(clf.argmax(x), p.argmax(1))
    assert torch.equal(clf.probabilities(x), p)


def test_wrong_input_size():
    clf = tiny_classifier()
    with pytest.raises(ShapeError):
        clf.probabilities(torch.zeros(1, 3, 9, 8, dtype=torch.float64))
    with pytest.raises(ShapeError):
        clf.probabilities(torch.zeros(1, 1, 8, 8, dtype=torch.float64))


def _fd_input_gradient(clf, x, label, idx, eps=1e-3):
    out = []
    for i in idx:
        e = torch.zeros(x.numel(), dtype=x.dtype)
        e[i] = eps
        e = e.view_as(x)
        lp = torch.nn.functional.cross_entropy(clf.logits(x + e), label, reduction="sum")
        lm = torch.nn.functional.cross_entropy(clf.logits(x - e), label, reduction="sum")
        out.append(((lp - lm) / (2 * eps)).item())
    return np.array(out)


@pytest.mark.parametrize("name", ["tiny"] + sorted(ARCHS))
def test_input_gradient_matches_finite_differences(name):
    if name == "tiny":
        clf = tiny_classifier()
    else:
        arch = ARCHS[name]()
        torch.manual_seed(0)
        net = build_network(arch, width=0.0625).double()
        clf = ClassifierHandle(net, arch.num_classes, arch.input_size)
    h, w = clf.input_size
    g = torch.Generator().manual_seed(1)
    x = torch.rand(1, 3, h, w, generator=g, dtype=torch.float64) * 0.8 + 0.1
    label = torch.tensor([3])
    grad = clf.input_gradient(x, label).ravel().numpy()
    idx = np.random.default_rng(0).choice(x.numel(), 20, replace=False)
    fd = _fd_input_gradient(clf, x, label, idx)
    err = np.abs(grad[idx] - fd) / np.maximum(np.abs(fd), 1e-8)
    # relu kinks can make individual coordinates noisy; require the aggregate to agree
    assert np.linalg.norm(grad[idx] - fd) / np.linalg.norm(fd) < 1e-3
    assert np.median(err) < 1e-3


def _toy_task(n=600, seed=0):
    # class = brightest channel, learnable by a small net in a few epochs
    g = np.random.default_rng(seed)
    labels = g.integers(0, 3, n)
    imgs = g.uniform(0, 0.4, (n, 3, 8, 8))
    imgs[np.arange(n), labels] += 0.5
    return LabeledDataset.from_float(torch.from_numpy(imgs), torch.from_numpy(labels), ("r", "g", "b"))


def test_training_learns_and_records_accuracy():
    train, test = _toy_task(), _toy_task(200, 1)
    cfg = TrainConfig(epochs=3, batch_size=32, lr=3e-3, mean=(0.5,) * 3, std=(0.25,) * 3)
    clf = train_classifier(tiny_arch(3), train, cfg, test)
    assert clf.meta["clean_accuracy"] == accuracy(clf, test)
    assert clf.meta["clean_accuracy"] > 0.9


def test_untrained_is_chance():
    data = load_shapes10(2000, seed=5)
    arch = cifar10_arch()
    clf = train_classifier(arch, data, TrainConfig(epochs=0, width=0.0625), data)
    assert abs(clf.meta["clean_accuracy"] - 0.1) <= 0.05


def test_training_is_deterministic():
    train = _toy_task(200)
    cfg = TrainConfig(epochs=1, batch_size=32, augment=True, mean=(0.5,) * 3, std=(0.25,) * 3)
    a = train_classifier(tiny_arch(3), train, cfg)
    b = train_classifier(tiny_arch(3), train, cfg)
    assert a.parameter_hash() == b.parameter_hash()


def test_label_out_of_range():
    data = random_dataset(num_classes=4)
    with pytest.raises(DatasetSchemaError):
        train_classifier(tiny_arch(3), data, TrainConfig(epochs=1))


def test_checkpoint_round_trip(tmp_path):
    train = _toy_task(100)
    clf = train_classifier(tiny_arch(3), train, TrainConfig(epochs=1, mean=(0.5,) * 3, std=(0.25,) * 3),
                           train, ("r", "g", "b"))
    back = load_classifier(save_classifier(tmp_path / "c.pt", clf))
    x = train.get(slice(0, 10))
    assert torch.equal(clf.logits(x), back.logits(x))
    assert back.label_names == ["r", "g", "b"]
    assert back.meta["clean_accuracy"] == clf.meta["clean_accuracy"]
    assert back.mean == (0.5,) * 3 and back.label_index("g") == 1


def test_cifar_loader(tmp_path):
    with pytest.raises(DatasetMissing):
        load_cifar10(tmp_path)
    base = tmp_path / "cifar-10-batches-py"
    base.mkdir()
    data = np.arange(2 * 3072, dtype=np.uint32).astype(np.uint8).reshape(2, 3072)
    with open(base / "test_batch", "wb") as fh:
        pickle.dump({"data": data, "labels": [1, 7]}, fh)
    ds = load_cifar10(tmp_path)
    assert len(ds) == 2 and ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [1, 7]
    assert ds.label_names[1] == "car" == CIFAR10_LABELS[1]
    assert torch.equal(ds.images[0, 0, 0, :4], torch.tensor([0, 1, 2, 3], dtype=torch.uint8))


def test_constant_oracle():
    clf = constant_classifier(2, num_classes=5, input_size=(8, 8))
    x = torch.rand(3, 3, 8, 8)
    assert clf.argmax(x).tolist() == [2, 2, 2]
    assert clf.probabilities(x)[:, 2].min() > 0.999


def test_dataset_helpers():
    data = random_dataset(10)
    sub = data.subset([1, 3])
    assert sub.indices.tolist() == [1, 3]
    assert sub.subset([1]).indices.tolist() == [3]
    with pytest.raises(TypeError):
        LabeledDataset(torch.zeros(2, 3, 4, 4), torch.zeros(2))
    batches = list(data.batches(4))
    assert [len(y) for _, y in batches] == [4, 4, 2]
