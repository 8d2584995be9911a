"""Fine-tuning a generator into an adversarial patch generator.

Instead of searching the latent space of a frozen generator, the generator
weights themselves are trained against the frozen classifier with the same
combined loss used by :mod:`tntpatch.tnt_search`. Every step draws a fresh
latent vector and a fresh image batch, so the result maps many ``z`` to
working patches at the price of looking less natural.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch

from .classifiers import ClassifierHandle, LabeledDataset
from .errors import ConfigError, EmptyPatch, FinetuneDiverged
from .evaluation import MODES, fooled_mask
from .gan_training import GeneratorHandle, save_generator
from .patch_ops import Patch, Placement, ThresholdConfig
from .tnt_search import (
    ImageSampler,
    attack_objective,
    frozen,
    render_patch,
    tensor_to_patch,
    validate_candidate,
)

log = logging.getLogger(__name__)

MAX_HALVINGS = 3


@dataclass
class FinetuneConfig:
    mode: str = "targeted"
    y_target: Optional[int] = None
    lambda_balance: float = 1.0
    batch_size: int = 32
    tau_batch: float = 0.9
    tau_val: float = 0.9
    placement: Placement = Placement("lower_right", 0.05)
    val_placement: Optional[Placement] = None
    threshold: ThresholdConfig = ThresholdConfig()
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    max_steps: int = 2000
    n_val_z: int = 8
    stop_on_pass: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "targeted" and self.y_target is None:
            raise ConfigError("targeted mode needs y_target")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.max_steps < 0 or self.batch_size < 1:
            raise ConfigError("max_steps must be >= 0 and batch_size >= 1")
        for name in ("tau_batch", "tau_val"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")

    @property
    def validation_placement(self):
        return self.val_placement or self.placement


@dataclass
class FinetuneResult:
    generator: GeneratorHandle
    converged: bool
    best_val_asr: Optional[float]
    steps: int
    per_z_val_asr: list = field(default_factory=list)
    halvings: int = 0
    cold_start: bool = False
    trace: list = field(default_factory=list)


def finetune_generator(generator: GeneratorHandle, classifier: ClassifierHandle, image_sampler,
                       cfg: FinetuneConfig, val_set: LabeledDataset,
                       cold_start: bool = False) -> FinetuneResult:
    """Adam on the generator weights until a fresh sample passes both gates.

    The input handle is left untouched; the returned one holds a copy. Gating
    follows the batch-then-validation pattern: when the step's batch fool
    fraction exceeds ``tau_batch`` a new latent sample is validated on
    ``val_set`` and the run stops once it reaches ``tau_val`` (unless
    ``stop_on_pass`` is off, in which case the best passing state is kept and
    training runs to ``max_steps``).

    A non-finite loss restores the last good weights and halves the step size;
    the third halving gives up with :class:`FinetuneDiverged`.
    """
    if isinstance(image_sampler, LabeledDataset):
        exclude = cfg.y_target if cfg.mode == "targeted" else None
        image_sampler = ImageSampler(image_sampler, exclude)
    handle = generator.copy()
    module = handle.module
    # running batch-norm statistics stay fixed; only weights move
    module.eval()
    rng = torch.Generator().manual_seed(cfg.seed)
    lr = cfg.lr
    opt = torch.optim.Adam(module.parameters(), lr=lr, betas=(cfg.beta1, cfg.beta2))
    last_good = copy.deepcopy(module.state_dict())
    saved_state = saved_val = None
    best_val = None
    halvings = 0
    trace = []
    converged = False
    step = 0
    dtype = handle.dtype

    with frozen(classifier.module):
        while step < cfg.max_steps:
            step += 1
            images, labels = image_sampler.sample(cfg.batch_size, rng, dtype)
            z = torch.randn(1, handle.latent_dim, generator=rng, dtype=dtype)
            loss, logp, clean, mask = attack_objective(handle, classifier, z, images, labels, cfg)
            if not torch.isfinite(loss):
                halvings += 1
                if halvings >= MAX_HALVINGS:
                    raise FinetuneDiverged(f"loss non-finite after {halvings} step-size halvings")
                module.load_state_dict(last_good)
                lr /= 2
                opt = torch.optim.Adam(module.parameters(), lr=lr, betas=(cfg.beta1, cfg.beta2))
                trace.append({"step": step, "event": "diverged", "lr": lr})
                continue
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            last_good = copy.deepcopy(module.state_dict())

            fooled, counted = fooled_mask(logp.detach().argmax(1), labels, cfg.mode, cfg.y_target)
            frac = int(fooled.sum()) / max(1, int(counted.sum()))
            rec = {"step": step, "L": loss.item(), "fool_fraction": frac}
            if frac > cfg.tau_batch:
                z_val = torch.randn(1, handle.latent_dim, generator=rng, dtype=dtype)
                try:
                    patch = emit_patch(handle, z_val, cfg.threshold)
                    val = validate_candidate(patch, classifier, val_set, cfg.validation_placement,
                                             cfg.mode, cfg.y_target)
                except EmptyPatch:
                    val = 0.0
                rec["val_asr"] = val
                if val >= cfg.tau_val and (saved_val is None or val > saved_val):
                    saved_val = val
                    saved_state = copy.deepcopy(module.state_dict())
                    converged = True
                best_val = val if best_val is None else max(best_val, val)
            trace.append(rec)
            if converged and cfg.stop_on_pass:
                break

    if saved_state is not None:
        module.load_state_dict(saved_state)
    module.eval()
    handle.lineage = dict(generator.lineage, finetuned=True,
                          source_checkpoint=generator.lineage.get("checkpoint"),
                          finetune=asdict(cfg), cold_start=cold_start)

    per_z = []
    if step > 0 and cfg.n_val_z > 0:
        zs = torch.randn(cfg.n_val_z, handle.latent_dim,
                         generator=torch.Generator().manual_seed(cfg.seed + 7919), dtype=dtype)
        for zi in zs:
            try:
                p = emit_patch(handle, zi[None], cfg.threshold)
                per_z.append(validate_candidate(p, classifier, val_set, cfg.validation_placement,
                                                cfg.mode, cfg.y_target))
            except EmptyPatch:
                per_z.append(None)
    return FinetuneResult(handle, converged, best_val, step, per_z, halvings, cold_start, trace)


def emit_patch(generator: GeneratorHandle, z, threshold=ThresholdConfig()) -> Patch:
    """Patch for latent ``z`` (shape ``(N,)`` or ``(1, N)``) from a fine-tuned generator."""
    z = torch.as_tensor(z, dtype=generator.dtype).reshape(1, generator.latent_dim)
    with torch.no_grad():
        _, mask, clean = render_patch(generator, z, threshold)
    if mask.sum() == 0:
        raise EmptyPatch("fine-tuned generator produced an empty patch")
    return tensor_to_patch(clean, mask, source="finetuned_sample")


def save_finetuned(path, result: FinetuneResult):
    return save_generator(path, result.generator, result.generator.lineage.get("finetune"))
