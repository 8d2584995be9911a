import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from tntpatch.errors import DatasetEmpty, TrainingDiverged
from tntpatch.gan_training import (
    DCGANCritic,
    GanTrainConfig,
    build_generator,
    critic_loss,
    gradient_penalty,
    load_generator,
    load_unlabeled_dataset,
    sample_patches,
    save_generator,
    train_wgan_gp,
    wgan_gp_losses,
)
from tntpatch.patch_ops import ThresholdConfig

SHAPE = (4, 3, 8, 8)
P = 3 * 8 * 8


def _batches(seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.rand(SHAPE, generator=g, dtype=torch.float64),
            torch.rand(SHAPE, generator=g, dtype=torch.float64))


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-12)


# -- data -------------------------------------------------------------------------


def test_folder_ingestion(tmp_path):
    for i, color in enumerate([(255, 0, 0), (0, 255, 0), (0, 0, 255)]):
        Image.new("RGB", (20, 12), color).save(tmp_path / f"img{i}.png")
    (tmp_path / "notes.txt").write_text("not an image")
    ds = load_unlabeled_dataset(tmp_path, 32)
    assert len(ds) == 3
    assert ds.images.shape == (3, 3, 32, 32)
    assert ds.skipped == 1
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    # files are read in name order; a seed gives a reproducible shuffle
    assert ds.images[0, 0].mean() == 1.0
    a = load_unlabeled_dataset(tmp_path, 32, seed=3)
    b = load_unlabeled_dataset(tmp_path, 32, seed=3)
    assert a.files == b.files and torch.equal(a.images, b.images)


def test_empty_folder(tmp_path):
    with pytest.raises(DatasetEmpty):
        load_unlabeled_dataset(tmp_path, 32)
    (tmp_path / "junk.bin").write_bytes(b"\x00\x01")
    with pytest.raises(DatasetEmpty):
        load_unlabeled_dataset(tmp_path, 32)


def test_builtin_corpus_size():
    ds = load_unlabeled_dataset("builtin:flowers:945", 16)
    assert len(ds) == 945 and ds.images.shape[1:] == (3, 16, 16)


# -- penalty and losses --------------------------------------------------------------


def test_penalty_linear_sum_critic():
    real, fake = _batches()
    gp = gradient_penalty(lambda x: x.sum(dim=(1, 2, 3)), real, fake, seed=0)
    assert rel_err(gp.item(), (math.sqrt(P) - 1) ** 2) < 1e-5


def test_penalty_unit_norm_critic():
    real, fake = _batches()
    w = torch.randn(SHAPE[1:], generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    w = w / w.norm()
    gp = gradient_penalty(lambda x: (x * w).sum(dim=(1, 2, 3)), real, fake, seed=0)
    assert abs(gp.item()) < 1e-5


def test_penalty_constant_critic():
    real, fake = _batches()
    gp = gradient_penalty(lambda x: torch.full((x.shape[0],), 3.0, dtype=x.dtype), real, fake, seed=0)
    assert rel_err(gp.item(), 1.0) < 1e-5


def test_penalty_shape_check():
    real, fake = _batches()
    with pytest.raises(ValueError):
        gradient_penalty(lambda x: x.sum(), real, fake[:2])


def test_losses_constant_critic_no_penalty():
    real, _ = _batches()
    const = lambda x: torch.full((x.shape[0],), 2.5, dtype=x.dtype)
    gen = lambda z: torch.zeros(z.shape[0], 3, 8, 8, dtype=torch.float64)
    c_loss, g_loss = wgan_gp_losses(const, gen, real, torch.zeros(4, 2), 0.0)
    assert c_loss.item() == 0.0
    assert g_loss.item() == -2.5


def test_losses_sum_critic():
    real = torch.ones(SHAPE, dtype=torch.float64)
    gen = lambda z: torch.zeros(z.shape[0], 3, 8, 8, dtype=torch.float64)
    c_loss, _ = wgan_gp_losses(lambda x: x.sum(dim=(1, 2, 3)), gen, real, torch.zeros(4, 2), 0.0)
    assert c_loss.item() == -P


def test_unit_norm_critic_penalty_does_not_change_loss():
    real, fake = _batches()
    w = torch.ones(SHAPE[1:], dtype=torch.float64) / math.sqrt(P)
    critic = lambda x: (x * w).sum(dim=(1, 2, 3))
    with_gp, _ = critic_loss(critic, real, fake, 10.0, torch.Generator().manual_seed(0))
    without, _ = critic_loss(critic, real, fake, 0.0)
    assert abs(with_gp.item() - without.item()) < 1e-6


def test_critic_step_decreases_loss():
    torch.manual_seed(0)
    critic = DCGANCritic(8, 4).double()
    real, fake = _batches()
    before, _ = critic_loss(critic, real, fake, 10.0, torch.Generator().manual_seed(0))
    before.backward()
    with torch.no_grad():
        for p in critic.parameters():
            p -= 1e-4 * p.grad
    after, _ = critic_loss(critic, real, fake, 10.0, torch.Generator().manual_seed(0))
    assert after.item() < before.item()


# -- training -----------------------------------------------------------------------


def _solid_colors(n=16, size=16, seed=0):
    rgb = np.random.default_rng(seed).uniform(size=(n, 3))
    return torch.from_numpy(np.broadcast_to(rgb[:, :, None, None], (n, 3, size, size)).astype(np.float32))


def test_zero_steps_returns_initial_generator():
    cfg = GanTrainConfig(latent_dim=8, output_size=16, width=4, total_steps=0, seed=5)
    g = train_wgan_gp(_solid_colors(), cfg)
    assert g.parameter_hash() == build_generator(8, 16, 4, seed=5).parameter_hash()
    assert g(g.sample_z(2)).shape == (2, 3, 16, 16)


def test_large_output_shape():
    g = build_generator(128, 64, 4)
    assert g(g.sample_z(2)).shape == (2, 3, 64, 64)


def test_training_is_reproducible(tmp_path):
    cfg = GanTrainConfig(latent_dim=8, output_size=8, width=4, batch_size=8, total_steps=10, seed=2,
                         log_every=5)
    a = train_wgan_gp(_solid_colors(size=8), cfg, out_dir=tmp_path)
    b = train_wgan_gp(_solid_colors(size=8), cfg)
    assert a.parameter_hash() == b.parameter_hash()
    recs = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [5, 10]
    assert set(recs[0]) == {"step", "critic_loss", "gen_loss", "penalty"}


def test_divergence_is_reported():
    data = _solid_colors(size=8)
    data[0] = float("nan")
    cfg = GanTrainConfig(latent_dim=8, output_size=8, width=4, batch_size=16, total_steps=5)
    with pytest.raises(TrainingDiverged):
        train_wgan_gp(data, cfg)


def test_solid_color_mean_sanity(tmp_path):
    data = _solid_colors()
    cfg = GanTrainConfig(latent_dim=16, output_size=16, width=8, batch_size=16, total_steps=2000,
                         seed=0, sample_every=1000, log_every=500)
    g = train_wgan_gp(data, cfg, out_dir=tmp_path)
    with torch.no_grad():
        mean = g(g.sample_z(256, seed=9)).mean().item()
    assert abs(mean - data.mean().item()) <= 0.15
    assert (tmp_path / "samples_001000.png").exists()


# -- sampling and checkpoints ------------------------------------------------------------


def test_output_range():
    g = build_generator(8, 16, 4)
    z = 10 * torch.randn(64, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        x = g(z)
    assert x.min() >= 0 and x.max() <= 1


def test_sample_patches_deterministic():
    g = build_generator(8, 16, 4)
    z = g.sample_z(8, seed=4)
    a = sample_patches(g, z)
    b = sample_patches(g, g.sample_z(8, seed=4))
    assert len(a) == 8
    for p, q in zip(a, b):
        assert p.delta.shape == (16, 16, 3)
        assert p.delta.tobytes() == q.delta.tobytes()
        assert p.meta["status"] == "ok"


def test_sample_patches_reports_empty():
    g = build_generator(8, 16, 4)
    patches = sample_patches(g, g.sample_z(2), ThresholdConfig("fixed", 0.999))
    assert [p.meta["status"] for p in patches] == ["empty", "empty"]
    assert patches[0].mask.sum() == 0


def test_checkpoint_round_trip(tmp_path):
    g = build_generator(8, 16, 4, seed=3)
    path = save_generator(tmp_path / "g.pt", g, GanTrainConfig(latent_dim=8, output_size=16), seed=3)
    back = load_generator(path)
    z = g.sample_z(4, seed=1)
    with torch.no_grad():
        assert torch.equal(g(z), back(z))
    assert back.lineage["checkpoint"] == str(path)
