"""WGAN-GP training of the naturalistic patch generator.

The generator is a DCGAN-style stack of transposed convolutions mapping a
standard-normal latent vector to a square RGB image; the critic mirrors it
with strided convolutions and no normalization layers (batch statistics would
break the per-sample gradient penalty).
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from PIL import Image, UnidentifiedImageError

from . import corpus
from .errors import DatasetEmpty, EmptyPatch, TrainingDiverged
from .patch_ops import Patch, ThresholdConfig, make_patch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tntpatch.generator"
CHECKPOINT_VERSION = 1


def _n_upsamples(output_size: int) -> int:
    n = math.log2(output_size / 4)
    if output_size < 8 or n != int(n):
        raise ValueError(f"output_size must be a power of two >= 8, got {output_size}")
    return int(n)


class DCGANGenerator(nn.Module):
    def __init__(self, latent_dim=128, output_size=32, width=64):
        super().__init__()
        n_up = _n_upsamples(output_size)
        chans = [width * 2 ** i for i in reversed(range(n_up))]
        layers = [
            nn.ConvTranspose2d(latent_dim, chans[0], 4, 1, 0, bias=False),
            nn.BatchNorm2d(chans[0]),
            nn.ReLU(True),
        ]
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [
                nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(True),
            ]
        layers.append(nn.ConvTranspose2d(chans[-1], 3, 4, 2, 1))
        self.net = nn.Sequential(*layers)
        self.latent_dim = latent_dim

    def forward(self, z):
        x = self.net(z.view(z.shape[0], self.latent_dim, 1, 1))
        # squash to [0, 1]
        return (torch.tanh(x) + 1) / 2


class DCGANCritic(nn.Module):
    def __init__(self, input_size=32, width=64):
        super().__init__()
        n_down = _n_upsamples(input_size)
        chans = [3] + [width * 2 ** i for i in range(n_down)]
        layers = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        layers.append(nn.Conv2d(chans[-1], 1, 4, 1, 0))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).view(x.shape[0])


@dataclass
class GanTrainConfig:
    latent_dim: int = 128
    output_size: int = 32
    width: int = 64
    critic_width: Optional[int] = None
    lambda_gp: float = 10.0
    critic_steps_per_gen_step: int = 5
    batch_size: int = 64
    total_steps: int = 10000
    lr_generator: float = 1e-4
    lr_critic: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    hflip: bool = True
    seed: int = 0
    log_every: int = 50
    sample_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lambda_gp < 0:
            raise ValueError("lambda_gp must be >= 0")
        for name in ("critic_steps_per_gen_step", "batch_size", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


@dataclass
class GeneratorHandle:
    module: nn.Module
    latent_dim: int
    output_size: int
    width: int = 64
    version: int = CHECKPOINT_VERSION
    lineage: dict = field(default_factory=dict)

    def __call__(self, z):
        return self.module(z)

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    def sample_z(self, n, seed=None, generator=None):
        if generator is None:
            generator = torch.Generator().manual_seed(0 if seed is None else seed)
        return torch.randn(n, self.latent_dim, generator=generator, dtype=self.dtype)

    def parameter_hash(self) -> str:
        return parameter_hash(self.module)

    def copy(self) -> "GeneratorHandle":
        return GeneratorHandle(
            copy.deepcopy(self.module), self.latent_dim, self.output_size, self.width,
            self.version, dict(self.lineage),
        )


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_generator(latent_dim=128, output_size=32, width=64, seed=0) -> GeneratorHandle:
    torch.manual_seed(seed)
    module = DCGANGenerator(latent_dim, output_size, width).eval()
    return GeneratorHandle(module, latent_dim, output_size, width)


# -- data ---------------------------------------------------------------------


@dataclass
class UnlabeledDataset:
    images: torch.Tensor  # (N, 3, S, S) float32 in [0, 1]
    files: list = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return self.images.shape[0]

    def __iter__(self):
        return iter(self.images)

    def mean(self) -> float:
        return float(self.images.mean())


def load_unlabeled_dataset(path, target_size: int, seed: Optional[int] = None) -> UnlabeledDataset:
    """Read every decodable raster image under ``path`` resized to a square.

    ``path`` may also be ``"builtin:flowers"`` or ``"builtin:flowers:<n>"`` for
    the procedural stand-in corpus. Files are ordered by name; a ``seed``
    applies a reproducible shuffle on top of that.
    """
    if str(path).startswith("builtin:flowers"):
        parts = str(path).split(":")
        n = int(parts[2]) if len(parts) > 2 else 256
        arr = corpus.flowers(n, target_size, seed=0)
        images = torch.from_numpy(arr.transpose(0, 3, 1, 2).astype(np.float32))
        files = [f"builtin:flowers/{i}" for i in range(n)]
    else:
        root = Path(path)
        if not root.is_dir():
            raise DatasetEmpty(f"{root} is not a directory")
        candidates = sorted(p for p in root.rglob("*") if p.is_file())
        imgs, files, skipped = [], [], 0
        for p in candidates:
            try:
                with Image.open(p) as im:
                    im = im.convert("RGB").resize((target_size, target_size), Image.BILINEAR)
                    imgs.append(np.asarray(im, dtype=np.float32) / 255.0)
                    files.append(str(p))
            except (UnidentifiedImageError, OSError):
                skipped += 1
        if skipped:
            log.warning("skipped %d undecodable files under %s", skipped, root)
        if not imgs:
            raise DatasetEmpty(f"no decodable images under {root}")
        images = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2).copy())
        if seed is not None:
            perm = torch.randperm(len(imgs), generator=torch.Generator().manual_seed(seed))
            images = images[perm]
            files = [files[i] for i in perm.tolist()]
        return UnlabeledDataset(images, files, skipped)
    if seed is not None:
        perm = torch.randperm(len(files), generator=torch.Generator().manual_seed(seed))
        images, files = images[perm], [files[i] for i in perm.tolist()]
    return UnlabeledDataset(images, files, 0)


# -- objective ----------------------------------------------------------------


def gradient_penalty(critic, real, fake, generator: Optional[torch.Generator] = None, seed=None):
    """Mean of ``(||grad D(x_hat)||_2 - 1)^2`` over random interpolates.

    ``x_hat = u * real + (1 - u) * fake`` with one ``u ~ U(0, 1)`` per sample.
    ``critic`` may be any callable mapping a batch to one score per sample.
    """
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    if generator is None and seed is not None:
        generator = torch.Generator().manual_seed(seed)
    u = torch.rand(real.shape[0], *([1] * (real.dim() - 1)), generator=generator, dtype=real.dtype)
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    grad = None
    if torch.is_tensor(scores) and scores.requires_grad:
        grad, = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(x_hat)
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norms - 1) ** 2).mean()


def critic_loss(critic, real, fake, lambda_gp, generator=None):
    fake = fake.detach()
    loss = critic(fake).mean() - critic(real).mean()
    penalty = gradient_penalty(critic, real, fake, generator) if lambda_gp else real.new_zeros(())
    return loss + lambda_gp * penalty, penalty


def wgan_gp_losses(critic, generator, real_batch, z_batch, lambda_gp, rng=None):
    """Return ``(critic_loss, generator_loss)`` for one batch."""
    fake = generator(z_batch)
    c_loss, _ = critic_loss(critic, real_batch, fake, lambda_gp, rng)
    g_loss = -critic(fake).mean()
    return c_loss, g_loss


# -- training -----------------------------------------------------------------


def save_generator(path, handle: GeneratorHandle, config=None, seed=None, **lineage) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lin = dict(handle.lineage)
    lin.update(lineage)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "state_dict": handle.module.state_dict(),
            "latent_dim": handle.latent_dim,
            "output_size": handle.output_size,
            "width": handle.width,
            "config": asdict(config) if config is not None and not isinstance(config, dict) else config,
            "seed": seed,
            "lineage": lin,
        },
        path,
    )
    return path


def load_generator(path) -> GeneratorHandle:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a generator checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {ckpt['version']} is newer than supported")
    module = DCGANGenerator(ckpt["latent_dim"], ckpt["output_size"], ckpt["width"])
    module.load_state_dict(ckpt["state_dict"])
    module.eval()
    lineage = dict(ckpt.get("lineage") or {})
    lineage.setdefault("checkpoint", str(path))
    return GeneratorHandle(
        module, ckpt["latent_dim"], ckpt["output_size"], ckpt["width"], ckpt["version"], lineage
    )


def save_sample_grid(path, images: torch.Tensor, nrow=8):
    from torchvision.utils import save_image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image(images.detach().float(), str(path), nrow=nrow)


def train_wgan_gp(dataset, config: GanTrainConfig, out_dir=None, return_critic=False):
    """Train a generator on ``dataset`` (an :class:`UnlabeledDataset` or tensor).

    Every ``checkpoint_every`` generator steps a checkpoint is written to
    ``out_dir``; every ``sample_every`` steps a sample grid. The training log is
    appended to ``out_dir/train_log.jsonl``. Raises :class:`TrainingDiverged`
    when the critic loss stops being finite.
    """
    images = dataset.images if isinstance(dataset, UnlabeledDataset) else torch.as_tensor(dataset)
    if images.shape[0] == 0:
        raise DatasetEmpty("cannot train on an empty dataset")
    if images.shape[-1] != config.output_size:
        raise ValueError(
            f"dataset images are {images.shape[-1]}px, generator output is {config.output_size}px"
        )
    torch.manual_seed(config.seed)
    gen = DCGANGenerator(config.latent_dim, config.output_size, config.width)
    critic = DCGANCritic(config.output_size, config.critic_width or config.width)
    handle = GeneratorHandle(gen, config.latent_dim, config.output_size, config.width)
    rng = torch.Generator().manual_seed(config.seed)
    opt_g = torch.optim.Adam(gen.parameters(), config.lr_generator, (config.beta1, config.beta2))
    opt_d = torch.optim.Adam(critic.parameters(), config.lr_critic, (config.beta1, config.beta2))

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "w")
    fixed_z = torch.randn(64, config.latent_dim, generator=torch.Generator().manual_seed(config.seed + 1))
    last_good = None
    n = images.shape[0]
    bs = min(config.batch_size, n)

    def real_batch():
        idx = torch.randint(0, n, (bs,), generator=rng)
        x = images[idx]
        if config.hflip:
            flip = torch.rand(bs, generator=rng) < 0.5
            x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
        return x

    try:
        gen.train()
        for step in range(1, config.total_steps + 1):
            for _ in range(config.critic_steps_per_gen_step):
                z = torch.randn(bs, config.latent_dim, generator=rng)
                with torch.no_grad():
                    fake = gen(z)
                d_loss, penalty = critic_loss(critic, real_batch(), fake, config.lambda_gp, rng)
                if not torch.isfinite(d_loss):
                    raise TrainingDiverged(
                        f"critic loss became {d_loss.item()} at step {step}", last_good
                    )
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()

            for p in critic.parameters():
                p.requires_grad_(False)
            z = torch.randn(bs, config.latent_dim, generator=rng)
            g_loss = -critic(gen(z)).mean()
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()
            for p in critic.parameters():
                p.requires_grad_(True)

            if log_file is not None and (step % config.log_every == 0 or step == config.total_steps):
                rec = {
                    "step": step,
                    "critic_loss": d_loss.item(),
                    "gen_loss": g_loss.item(),
                    "penalty": penalty.item(),
                }
                log_file.write(json.dumps(rec) + "\n")
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                gen.eval()
                last_good = save_generator(out_dir / "generator_last.pt", handle, config, config.seed)
                gen.train()
            if out_dir is not None and config.sample_every and step % config.sample_every == 0:
                gen.eval()
                with torch.no_grad():
                    save_sample_grid(out_dir / f"samples_{step:06d}.png", gen(fixed_z))
                gen.train()
    finally:
        gen.eval()
        if log_file is not None:
            log_file.close()
    handle.lineage = {"trained_steps": config.total_steps, "seed": config.seed}
    if return_critic:
        return handle, critic
    return handle


def sample_patches(generator: GeneratorHandle, z_batch, threshold_cfg=ThresholdConfig(),
                   source="generator_sample") -> list:
    """Generate one :class:`Patch` per latent row.

    A sample whose mask comes out empty is still returned, with an all-zero
    mask and ``meta["status"] == "empty"``; all others carry ``"ok"``.
    """
    z_batch = torch.as_tensor(z_batch, dtype=generator.dtype)
    if z_batch.dim() != 2 or z_batch.shape[1] != generator.latent_dim:
        raise ValueError(f"z_batch must be (B, {generator.latent_dim})")
    with torch.no_grad():
        out = generator(z_batch).double().numpy().transpose(0, 2, 3, 1)
    patches = []
    for delta in out:
        try:
            p = make_patch(delta, threshold_cfg, source)
            p.meta["status"] = "ok"
        except EmptyPatch:
            p = Patch(delta * 0.0, np.zeros(delta.shape[:2], np.uint8), source, {"status": "empty"})
        patches.append(p)
    return patches
