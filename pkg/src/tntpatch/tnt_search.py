"""Latent-space search for a universal naturalistic patch.

A patch is ``G(z)`` for a frozen generator ``G``. Starting from
``z ~ N(0, I)``, each inner iteration generates the patch, thresholds away
its background, stamps it onto a batch of images, and scores the batch with
the frozen classifier. ``z`` then moves by a fixed-size signed-gradient step
on the combined loss

    L = CE(x', y_target) - lambda * CE(x', y_source)      (targeted)
    L = -CE(x', y_source)                                  (untargeted)

When more than ``tau_batch`` of the batch is fooled, the current patch is
checked on a held-out validation split and accepted once its success rate
reaches ``tau_val``. Restarts draw a fresh ``z`` and a fresh batch.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .classifiers import ClassifierHandle, LabeledDataset
from .errors import ConfigError
from .evaluation import MODES, attack_success_rate, fooled_mask
from .gan_training import GeneratorHandle
from .patch_ops import (
    Patch,
    Placement,
    ThresholdConfig,
    load_patch,
    mask_tensor,
    place_tensor,
    quantize,
    save_patch,
    stamp_tensor,
)

log = logging.getLogger(__name__)


@dataclass
class AttackConfig:
    mode: str = "targeted"
    y_target: Optional[int] = None
    lambda_balance: float = 1.0
    epsilon: float = 0.01
    n_iter: int = 20
    batch_size: int = 32
    tau_batch: float = 0.9
    tau_val: float = 0.9
    placement: Placement = Placement("lower_right", 0.2)
    val_placement: Optional[Placement] = None
    threshold: ThresholdConfig = ThresholdConfig()
    max_restarts: int = 50
    update_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "targeted" and self.y_target is None:
            raise ConfigError("targeted mode needs y_target")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be > 0")
        if self.n_iter < 1 or self.batch_size < 1 or self.update_every < 1:
            raise ConfigError("n_iter, batch_size and update_every must be >= 1")
        if self.max_restarts < 0:
            raise ConfigError("max_restarts must be >= 0")
        for name in ("tau_batch", "tau_val"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")

    @property
    def validation_placement(self) -> Placement:
        return self.val_placement or self.placement

    def to_dict(self):
        return asdict(self)


@dataclass
class TnTCandidate:
    z: np.ndarray
    patch: Optional[Patch]
    batch_asr: Optional[float]
    val_asr: Optional[float] = None
    target_label: Optional[int] = None
    converged: bool = False
    mode: str = "targeted"
    placement: Placement = Placement("lower_right", 0.2)
    provenance: dict = field(default_factory=dict)
    restarts_used: int = 0
    aborted_restarts: int = 0
    empty_resamples: int = 0
    trace: list = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "z": [float(v) for v in self.z],
            "batch_asr": self.batch_asr,
            "val_asr": self.val_asr,
            "target_label": self.target_label,
            "converged": self.converged,
            "mode": self.mode,
            "placement": asdict(self.placement),
            "provenance": self.provenance,
            "restarts_used": self.restarts_used,
            "aborted_restarts": self.aborted_restarts,
            "empty_resamples": self.empty_resamples,
            "has_patch": self.patch is not None,
        }


def save_bundle(candidate: TnTCandidate, directory) -> Path:
    """Write ``patch.png``, ``candidate.json`` and ``trace.jsonl`` to ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if candidate.patch is not None:
        save_patch(directory / "patch.png", candidate.patch)
    (directory / "candidate.json").write_text(
        json.dumps(candidate.metadata(), sort_keys=True, indent=2) + "\n"
    )
    with open(directory / "trace.jsonl", "w") as fh:
        for rec in candidate.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return directory


def load_bundle(directory) -> TnTCandidate:
    directory = Path(directory)
    meta = json.loads((directory / "candidate.json").read_text())
    patch = None
    if meta["has_patch"]:
        patch = load_patch(directory / "patch.png", source="generator_sample")
    trace = []
    if (directory / "trace.jsonl").exists():
        trace = [json.loads(l) for l in (directory / "trace.jsonl").read_text().splitlines() if l]
    return TnTCandidate(
        np.asarray(meta["z"]), patch, meta["batch_asr"], meta["val_asr"], meta["target_label"],
        meta["converged"], meta["mode"], Placement(**meta["placement"]), meta["provenance"],
        meta["restarts_used"], meta["aborted_restarts"], meta["empty_resamples"], trace,
    )


# -- loss and update ------------------------------------------------------------


def _gather_nll(logp, labels):
    labels = torch.as_tensor(labels, device=logp.device).long()
    labels = labels.expand(logp.shape[0]) if labels.dim() == 0 else labels
    return -logp.gather(1, labels[:, None]).squeeze(1).mean()


def combined_loss(prob_batch, y_target, y_source, lambda_balance=1.0, mode="targeted",
                  log_probs=False):
    """Attack objective from class probabilities (or log-probabilities).

    Targeted: ``CE(y_target) - lambda_balance * CE(y_source)``.
    Untargeted: ``-CE(y_source)``; ``lambda_balance`` is unused.
    """
    if log_probs:
        logp = prob_batch
    else:
        logp = torch.log(prob_batch.clamp_min(torch.finfo(prob_batch.dtype).tiny))
    source_ce = _gather_nll(logp, y_source)
    if mode == "untargeted":
        return -source_ce
    if mode != "targeted":
        raise ConfigError(f"unknown mode {mode!r}")
    if y_target is None:
        raise ConfigError("targeted mode needs y_target")
    return _gather_nll(logp, y_target) - lambda_balance * source_ce


def latent_step(z, grad_z, epsilon):
    """``z - epsilon * sign(grad_z)``; coordinates with zero gradient stay put."""
    if torch.is_tensor(z):
        if grad_z.shape != z.shape:
            raise ValueError("gradient and latent shapes differ")
        return z - epsilon * torch.sign(grad_z)
    z, grad_z = np.asarray(z), np.asarray(grad_z)
    if grad_z.shape != z.shape:
        raise ValueError("gradient and latent shapes differ")
    return z - epsilon * np.sign(grad_z)


def render_patch(generator, z, threshold=ThresholdConfig(), mask=None):
    """``(delta, mask, delta_without_background)`` for a latent batch ``(B, N)``.

    Pass ``mask`` to hold it fixed (used by gradient checks); otherwise it is
    recomputed from the generated image. Either way it carries no gradient.
    """
    delta = generator(z)
    if mask is None:
        mask = mask_tensor(delta, threshold)
    return delta, mask, delta * mask


def stamped_batch(generator, z, images, placement, threshold=ThresholdConfig(), mask=None):
    delta, mask, clean = render_patch(generator, z, threshold, mask)
    h, w = images.shape[-2:]
    placed, pmask = place_tensor(clean, mask, placement, h, w)
    return stamp_tensor(images, placed, pmask), clean, mask


def attack_objective(generator, classifier, z, images, labels, config: AttackConfig, mask=None):
    """Loss ``L`` plus intermediates for one latent row ``z`` of shape ``(1, N)``."""
    x_adv, clean, mask = stamped_batch(generator, z, images, config.placement, config.threshold, mask)
    logp = classifier.log_probabilities(x_adv)
    loss = combined_loss(logp, config.y_target, labels, config.lambda_balance, config.mode,
                         log_probs=True)
    return loss, logp, clean, mask


def tensor_to_patch(clean, mask, source="generator_sample") -> Patch:
    """Convert a ``(1, 3, h, w)`` background-free patch to an 8-bit-exact :class:`Patch`."""
    delta = quantize(clean[0].detach().double().numpy().transpose(1, 2, 0)).clip(0, 1)
    m = mask[0, 0].detach().numpy().astype(np.uint8)
    return Patch(delta * m[..., None], m, source)


def validate_candidate(patch: Patch, classifier, val_set, placement, mode="targeted",
                       y_target=None) -> float:
    """Success rate of ``patch`` over ``val_set``."""
    if val_set is None or len(val_set) == 0:
        raise ConfigError("validation set is empty")
    cell = attack_success_rate(classifier, val_set, patch, placement, mode, y_target)
    if cell.asr is None:
        raise ConfigError("no validation sample counts toward the success rate")
    return cell.asr


class ImageSampler:
    """Draws labeled batches without replacement from a dataset.

    In targeted attacks pass ``exclude_label=y_target`` so the batch never
    contains images that already belong to the target class.
    """

    def __init__(self, dataset: LabeledDataset, exclude_label=None):
        self.dataset = dataset
        keep = torch.ones(len(dataset), dtype=torch.bool)
        if exclude_label is not None:
            keep = dataset.labels != exclude_label
        self.pool = torch.nonzero(keep).flatten()
        if len(self.pool) == 0:
            raise ConfigError("image sampler has no eligible images")

    def sample(self, m, generator: torch.Generator, dtype=torch.float32):
        pick = self.pool[torch.randperm(len(self.pool), generator=generator)[:m]]
        return self.dataset.get(pick, dtype), self.dataset.labels[pick]


@contextmanager
def frozen(*modules):
    """Disable parameter gradients inside the block, restoring the old flags after."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad_(f)


def restart_seed(seed, restart):
    return int(np.random.SeedSequence([seed, restart]).generate_state(1)[0])


@dataclass
class _RestartOutcome:
    index: int
    best: Optional[tuple] = None  # (fool_fraction, iteration, z, patch, val_asr)
    converged: Optional[tuple] = None
    trace: list = field(default_factory=list)
    aborted: bool = False
    empty: int = 0


def _run_restart(r, generator, classifier, sampler, config: AttackConfig, val_set):
    rng = torch.Generator().manual_seed(restart_seed(config.seed, r))
    dtype = generator.dtype
    images, labels = sampler.sample(config.batch_size, rng, dtype)
    z = torch.randn(1, generator.latent_dim, generator=rng, dtype=dtype)
    out = _RestartOutcome(r)
    cached = None  # (z, loss, logp, clean, mask, grad) reused while z is unchanged
    for j in range(config.n_iter):
        if cached is None:
            zv = z.clone().requires_grad_(True)
            loss, logp, clean, mask = attack_objective(generator, classifier, zv, images, labels, config)
            if mask.sum() == 0:
                out.empty += 1
                z = torch.randn(1, generator.latent_dim, generator=rng, dtype=dtype)
                out.trace.append({"restart": r, "iter": j, "event": "empty_patch"})
                continue
            grad, = torch.autograd.grad(loss, zv)
            cached = (loss.detach(), logp.detach(), clean.detach(), mask, grad)
        loss, logp, clean, mask, grad = cached
        if not (torch.isfinite(loss) and torch.isfinite(grad).all()):
            out.aborted = True
            out.trace.append({"restart": r, "iter": j, "event": "non_finite"})
            break
        fooled, counted = fooled_mask(logp.argmax(1), labels, config.mode, config.y_target)
        frac = int(fooled.sum()) / max(1, int(counted.sum()))
        out.trace.append({
            "restart": r,
            "iter": j,
            "fool_fraction": frac,
            "L": loss.item(),
            "grad_inf_norm": float(grad.abs().max()),
        })
        if out.best is None or frac > out.best[0]:
            out.best = (frac, j, z.detach().clone(), tensor_to_patch(clean, mask), None)
        if frac > config.tau_batch:
            patch = tensor_to_patch(clean, mask)
            val = validate_candidate(patch, classifier, val_set, config.validation_placement,
                                     config.mode, config.y_target)
            out.trace[-1]["val_asr"] = val
            if out.best[0] == frac and out.best[1] == j:
                out.best = out.best[:4] + (val,)
            if val >= config.tau_val:
                out.converged = (frac, j, z.detach().clone(), patch, val)
                break
        if (j + 1) % config.update_every == 0:
            z = latent_step(z, grad, config.epsilon).detach()
            cached = None
    return out


def search_tnt(generator: GeneratorHandle, classifier: ClassifierHandle, image_sampler,
               config: AttackConfig, val_set: LabeledDataset, workers: int = 1,
               provenance: Optional[dict] = None, trace_path=None) -> TnTCandidate:
    """Run restarts until a patch passes both gates or the budget runs out.

    Restart ``r`` is seeded from ``(config.seed, r)`` alone, so running
    restarts in parallel (``workers > 1``) returns the same candidate as the
    sequential run: the converged restart with the lowest index wins.
    Without convergence the best batch fool fraction seen is returned with
    ``converged=False``.
    """
    if isinstance(image_sampler, LabeledDataset):
        exclude = config.y_target if config.mode == "targeted" else None
        image_sampler = ImageSampler(image_sampler, exclude)
    prov = {
        "generator": generator.lineage.get("checkpoint", generator.parameter_hash()[:16]),
        "classifier": classifier.meta.get("checkpoint", classifier.parameter_hash()[:16]),
        "seed": config.seed,
    }
    prov.update(provenance or {})
    generator.module.eval()
    outcomes = []
    chosen = None
    workers = max(1, int(workers))
    r = 0
    with frozen(generator.module, classifier.module):
        while r < config.max_restarts and chosen is None:
            chunk = list(range(r, min(r + workers, config.max_restarts)))
            run = lambda i: _run_restart(i, generator, classifier, image_sampler, config, val_set)
            if workers > 1:
                with ThreadPoolExecutor(workers) as ex:
                    results = list(ex.map(run, chunk))
            else:
                results = [run(chunk[0])]
            for res in results:
                outcomes.append(res)
                if res.converged is not None:
                    chosen = res
                    break
            r = chunk[-1] + 1

    trace, best_so_far = [], 0.0
    for res in outcomes:
        for rec in res.trace:
            if "fool_fraction" in rec:
                best_so_far = max(best_so_far, rec["fool_fraction"])
            rec = dict(rec, best_fool_fraction=best_so_far)
            trace.append(rec)
    if trace_path is not None:
        Path(trace_path).parent.mkdir(parents=True, exist_ok=True)
        with open(trace_path, "w") as fh:
            for rec in trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    common = dict(
        target_label=config.y_target if config.mode == "targeted" else None,
        mode=config.mode,
        placement=config.validation_placement,
        provenance=prov,
        restarts_used=len(outcomes),
        aborted_restarts=sum(o.aborted for o in outcomes),
        empty_resamples=sum(o.empty for o in outcomes),
        trace=trace,
    )
    if chosen is not None:
        frac, _, z, patch, val = chosen.converged
        return TnTCandidate(z[0].numpy(), patch, frac, val, converged=True, **common)

    best = None
    for res in outcomes:
        if res.best is not None and (best is None or res.best[0] > best[0]):
            best = res.best
    if best is None:
        # no restart produced a usable patch: report the first latent draw
        rng = torch.Generator().manual_seed(restart_seed(config.seed, 0))
        z = torch.randn(1, generator.latent_dim, generator=rng, dtype=generator.dtype)
        with torch.no_grad():
            _, mask, clean = render_patch(generator, z, config.threshold)
        patch = tensor_to_patch(clean, mask) if mask.sum() > 0 else None
        return TnTCandidate(z[0].numpy(), patch, None, None, converged=False, **common)
    frac, _, z, patch, val = best
    return TnTCandidate(z[0].numpy(), patch, frac, val, converged=False, **common)
