"""Pipeline stages driven by a :class:`~tntpatch.config.RunConfig`.

Each stage reads its inputs from the artifact store, writes one directory
``<root>/<kind>/<hash16>/`` holding its outputs plus the effective config,
and returns that directory. A stage whose directory is already complete is
reused rather than recomputed. The CLI subcommands are thin wrappers around
these functions.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import classifiers as clfs
from .adv_patch_generator import FinetuneConfig, emit_patch, finetune_generator
from .config import ARTIFACT_SECTIONS, DATA_ROOT_ENV, ArtifactStore, RunConfig
from .errors import ConfigError, EmptyPatch, TnTError
from .evaluation import (
    EvaluationReport,
    attack_success_rate,
    canonical_placements,
    location_sweep,
    make_splits,
    plot_location_table,
    plot_size_curves,
    random_patch_baseline,
    size_sweep,
    spread,
    transfer_matrix,
)
from .gan_training import (
    GanTrainConfig,
    build_generator,
    load_generator,
    load_unlabeled_dataset,
    save_generator,
    save_sample_grid,
    train_wgan_gp,
)
from .patch_ops import Placement
from .tnt_search import AttackConfig, load_bundle, save_bundle, search_tnt

log = logging.getLogger(__name__)

DONE = "DONE"


class ArtifactMissing(TnTError):
    """An upstream stage has not been run for this config."""


@dataclass
class Task:
    train: clfs.LabeledDataset
    test: clfs.LabeledDataset
    label_names: tuple
    mean: tuple
    std: tuple


def load_task(cfg: RunConfig) -> Task:
    ds = cfg.dataset
    if ds.kind == "shapes10":
        train = clfs.load_shapes10(ds.n_train, seed=1)
        test = clfs.load_shapes10(ds.n_test, seed=2)
        mean, std = clfs.channel_stats(train)
        return Task(train, test, tuple(train.label_names), mean, std)
    root = ds.root or os.environ.get(DATA_ROOT_ENV)
    if root is None:
        raise ConfigError(f"dataset.root (or ${DATA_ROOT_ENV}) must point at the {ds.kind} data")
    if ds.kind == "cifar10":
        return Task(clfs.load_cifar10(root, train=True), clfs.load_cifar10(root, train=False),
                    clfs.CIFAR10_LABELS, clfs.CIFAR10_MEAN, clfs.CIFAR10_STD)
    train = clfs.load_gtsrb(root, train=True)
    return Task(train, clfs.load_gtsrb(root, train=False), tuple(train.label_names),
                clfs.GTSRB_MEAN, clfs.GTSRB_STD)


def _store(cfg: RunConfig) -> ArtifactStore:
    return ArtifactStore(cfg.artifact_root())


def _begin(store, kind, cfg) -> tuple:
    out = store.path(kind, cfg)
    if (out / DONE).exists():
        return out, True
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "kind": kind,
        "hash": cfg.hash(*ARTIFACT_SECTIONS[kind]),
        "sections": list(ARTIFACT_SECTIONS[kind]),
        "config": json.loads(cfg.canonical()),
    }
    (out / "config.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return out, False


def _finish(store, kind, out):
    (out / DONE).write_text("")
    store.publish(kind, out)
    return out


def _require(store, kind, cfg) -> Path:
    out = store.path(kind, cfg)
    if not (out / DONE).exists():
        cmd = {"gan": "train-gan", "classifier": "train-classifier", "tnt": "search-tnt",
               "advgen": "finetune-advgen"}[kind]
        raise ArtifactMissing(f"no {kind} artifact at {out}; run `tntpatch {cmd}` with this config first")
    return out


def plan(cfg: RunConfig) -> dict:
    """Artifact directories each stage would read or write, without touching disk."""
    store = _store(cfg)
    return {kind: str(store.path(kind, cfg)) for kind in ARTIFACT_SECTIONS}


def resolve_target(cfg: RunConfig, label_names) -> Optional[int]:
    a = cfg.attack
    if a.mode == "untargeted":
        return None
    if a.target is None:
        raise ConfigError("attack.target is required in targeted mode")
    if isinstance(a.target, str):
        if a.target not in label_names:
            raise ConfigError(f"unknown target label {a.target!r}; known: {list(label_names)}")
        return list(label_names).index(a.target)
    if not 0 <= a.target < len(label_names):
        raise ConfigError(f"target index {a.target} out of range")
    return a.target


def gan_corpus(cfg: RunConfig):
    return load_unlabeled_dataset(cfg.gan.data_dir, cfg.gan.output_size)


# -- stages ---------------------------------------------------------------------


def train_gan(cfg: RunConfig) -> Path:
    store = _store(cfg)
    out, done = _begin(store, "gan", cfg)
    if done:
        log.info("reusing generator at %s", out)
        return out
    g = cfg.gan
    tc = GanTrainConfig(
        latent_dim=g.latent_dim, output_size=g.output_size, width=g.width, lambda_gp=g.lambda_gp,
        critic_steps_per_gen_step=g.critic_steps_per_gen_step, batch_size=g.batch_size,
        total_steps=g.total_steps, lr_generator=g.lr_generator, lr_critic=g.lr_critic,
        beta1=g.beta1, beta2=g.beta2, hflip=g.hflip, seed=g.seed, sample_every=g.sample_every,
        checkpoint_every=g.checkpoint_every,
    )
    data = gan_corpus(cfg)
    log.info("training generator on %d images for %d steps", len(data), g.total_steps)
    handle = train_wgan_gp(data, tc, out_dir=out)
    save_generator(out / "generator.pt", handle, asdict(tc), g.seed, data_dir=g.data_dir)
    with torch.no_grad():
        save_sample_grid(out / "samples_final.png", handle(handle.sample_z(64, seed=g.seed + 1)))
    return _finish(store, "gan", out)


def _classifier_section(cfg: RunConfig, width=None, seed=None, epochs=None) -> RunConfig:
    update = {k: v for k, v in (("width", width), ("seed", seed), ("epochs", epochs)) if v is not None}
    return cfg.model_copy(update={"classifier": cfg.classifier.model_copy(update=update)})


def train_classifier(cfg: RunConfig, task: Optional[Task] = None) -> Path:
    store = _store(cfg)
    out, done = _begin(store, "classifier", cfg)
    if done:
        log.info("reusing classifier at %s", out)
        return out
    task = task or load_task(cfg)
    c = cfg.classifier
    arch = clfs.ARCHS[c.arch](len(task.label_names))
    tc = clfs.TrainConfig(c.epochs, c.batch_size, c.lr, c.width, c.augment, c.seed, task.mean, task.std)
    clf = clfs.train_classifier(arch, task.train, tc, task.test, task.label_names)
    clfs.save_classifier(out / "classifier.pt", clf)
    (out / "metrics.json").write_text(json.dumps(
        {"clean_accuracy": clf.meta.get("clean_accuracy"), "test_size": len(task.test)},
        sort_keys=True, indent=2) + "\n")
    log.info("clean accuracy %.4f", clf.meta.get("clean_accuracy", float("nan")))
    return _finish(store, "classifier", out)


def _split(cfg, task, name):
    if name == "train":
        return task.train
    splits = make_splits(task.test, cfg.dataset.split_sizes, cfg.dataset.split_seed)
    if name not in splits:
        raise ConfigError(f"unknown split {name!r}; have train, {', '.join(splits)}")
    return splits[name]


def attack_config(cfg: RunConfig, y_target) -> AttackConfig:
    a = cfg.attack
    val_pl = Placement(a.val_location, a.scale_fraction) if a.val_location else None
    return AttackConfig(
        mode=a.mode, y_target=y_target, lambda_balance=a.lambda_balance, epsilon=a.epsilon,
        n_iter=a.n_iter, batch_size=a.batch_size, tau_batch=a.tau_batch, tau_val=a.tau_val,
        placement=cfg.attack_placement(), val_placement=val_pl, threshold=cfg.threshold_cfg(),
        max_restarts=a.max_restarts, update_every=a.update_every, seed=a.seed,
    )


def search(cfg: RunConfig, workers=1, task: Optional[Task] = None) -> Path:
    """Run the latent search; the bundle is written whether or not it converged."""
    store = _store(cfg)
    gan_dir = _require(store, "gan", cfg)
    clf_dir = _require(store, "classifier", cfg)
    out, done = _begin(store, "tnt", cfg)
    if done:
        log.info("reusing candidate at %s", out)
        return out
    task = task or load_task(cfg)
    gen = load_generator(gan_dir / "generator.pt")
    clf = clfs.load_classifier(clf_dir / "classifier.pt")
    ac = attack_config(cfg, resolve_target(cfg, task.label_names))
    cand = search_tnt(gen, clf, _split(cfg, task, cfg.attack.search_split), ac,
                      _split(cfg, task, cfg.attack.val_split), workers=workers,
                      provenance={"generator_dir": gan_dir.name, "classifier_dir": clf_dir.name,
                                  "val_split": cfg.attack.val_split,
                                  "config_hash": cfg.hash(*ARTIFACT_SECTIONS["tnt"])})
    save_bundle(cand, out)
    log.info("search %s after %d restarts (val_asr=%s)",
             "converged" if cand.converged else "did not converge", cand.restarts_used, cand.val_asr)
    return _finish(store, "tnt", out)


def finetune_config(cfg: RunConfig, y_target) -> FinetuneConfig:
    a, f = cfg.attack, cfg.finetune
    return FinetuneConfig(
        mode=a.mode, y_target=y_target, lambda_balance=a.lambda_balance, batch_size=a.batch_size,
        tau_batch=a.tau_batch, tau_val=a.tau_val, placement=Placement(a.location, f.scale_fraction),
        threshold=cfg.threshold_cfg(), lr=f.lr, beta1=f.beta1, beta2=f.beta2,
        max_steps=f.max_steps, n_val_z=f.n_val_z, stop_on_pass=f.stop_on_pass, seed=f.seed,
    )


def finetune(cfg: RunConfig, task: Optional[Task] = None) -> Path:
    store = _store(cfg)
    clf_dir = _require(store, "classifier", cfg)
    if cfg.finetune.warm_start:
        gan_dir = _require(store, "gan", cfg)
    out, done = _begin(store, "advgen", cfg)
    if done:
        log.info("reusing fine-tuned generator at %s", out)
        return out
    task = task or load_task(cfg)
    if cfg.finetune.warm_start:
        gen = load_generator(gan_dir / "generator.pt")
    else:
        g = cfg.gan
        gen = build_generator(g.latent_dim, g.output_size, g.width, seed=g.seed)
    clf = clfs.load_classifier(clf_dir / "classifier.pt")
    fc = finetune_config(cfg, resolve_target(cfg, task.label_names))
    res = finetune_generator(gen, clf, _split(cfg, task, cfg.attack.search_split), fc,
                             _split(cfg, task, cfg.attack.val_split),
                             cold_start=not cfg.finetune.warm_start)
    save_generator(out / "generator.pt", res.generator, asdict(fc), cfg.finetune.seed)
    summary = {
        "converged": res.converged, "best_val_asr": res.best_val_asr, "steps": res.steps,
        "per_z_val_asr": res.per_z_val_asr, "halvings": res.halvings, "cold_start": res.cold_start,
    }
    (out / "result.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    with open(out / "trace.jsonl", "w") as fh:
        for rec in res.trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    log.info("fine-tune %s after %d steps (best val_asr=%s)",
             "converged" if res.converged else "did not converge", res.steps, res.best_val_asr)
    return _finish(store, "advgen", out)


def _advgen_source(gen, cfg):
    z = gen.sample_z(1, seed=cfg.finetune.seed + 104729)

    def source(_frac):
        return emit_patch(gen, z, cfg.threshold_cfg())

    return source


def evaluate(cfg: RunConfig, workers=1, task: Optional[Task] = None) -> Path:
    """Build the evaluation report for the searched patch (and fine-tuned generator, if present)."""
    t0 = time.time()
    store = _store(cfg)
    clf_dir = _require(store, "classifier", cfg)
    tnt_dir = _require(store, "tnt", cfg)
    out, done = _begin(store, "report", cfg)
    if done:
        log.info("reusing report at %s", out)
        return out
    task = task or load_task(cfg)
    ev, a = cfg.evaluation, cfg.attack
    clf = clfs.load_classifier(clf_dir / "classifier.pt")
    cand = load_bundle(tnt_dir)
    y_target = resolve_target(cfg, task.label_names)
    mode = a.mode
    placement = cfg.attack_placement()
    splits = make_splits(task.test, cfg.dataset.split_sizes, cfg.dataset.split_seed)
    for name in set(ev.splits) | {ev.baseline_split, ev.sweep_split}:
        if name not in splits:
            raise ConfigError(f"unknown evaluation split {name!r}")

    advgen = None
    adv_dir = store.path("advgen", cfg)
    if (adv_dir / DONE).exists():
        advgen = load_generator(adv_dir / "generator.pt")
    report = EvaluationReport(
        task=cfg.dataset.kind,
        classifiers=[{"name": "A", "dir": clf_dir.name, "clean_accuracy": clf.meta.get("clean_accuracy")}],
        patches=[{"name": "tnt", "dir": tnt_dir.name, "converged": cand.converged,
                  "val_asr": cand.val_asr, "has_patch": cand.patch is not None}],
        mode=mode,
        config_hash=cfg.hash(*ARTIFACT_SECTIONS["report"]),
        seeds={"split": cfg.dataset.split_seed, "attack": a.seed, "finetune": cfg.finetune.seed,
               "gan": cfg.gan.seed, "classifier": cfg.classifier.seed},
        target_label=y_target,
    )
    if advgen is not None:
        report.patches.append({"name": "advgen", "dir": adv_dir.name})

    for name in ev.splits:
        row = {"clean": attack_success_rate(clf, splits[name], None, placement, mode, y_target)}
        if cand.patch is not None:
            row["tnt"] = attack_success_rate(clf, splits[name], cand.patch, placement, mode, y_target)
            if mode == "targeted":
                row["tnt_untargeted"] = attack_success_rate(clf, splits[name], cand.patch, placement)
        report.splits[name] = row

    sweep = splits[ev.sweep_split]
    if cand.patch is not None and ev.locations:
        table = location_sweep(clf, sweep, cand.patch, canonical_placements(a.scale_fraction),
                               mode, y_target, workers)
        report.locations = {"tnt": table}
        report.annotations.append(f"location spread (tnt): {spread(table):.4f}")

    curves = {}
    sources = {}
    if cand.patch is not None:
        sources["tnt"] = cand.patch
    if advgen is not None:
        sources["advgen"] = _advgen_source(advgen, cfg)
    for name, src in sources.items():
        for m in dict.fromkeys([mode, "untargeted"]):
            try:
                curves[f"{name}/{m}"] = size_sweep(clf, sweep, src, ev.sizes, m,
                                                   y_target if m == "targeted" else None,
                                                   a.location, workers)
            except EmptyPatch as exc:
                report.annotations.append(f"{name}: {exc}")
    report.sizes = curves

    base_split = splits[ev.baseline_split]
    side = max(2, int(round(np.sqrt(a.scale_fraction) * clf.input_size[0])))
    natural = None
    if "natural" in ev.baseline_kinds:
        natural = gan_corpus(cfg).images.numpy().transpose(0, 2, 3, 1)
    for kind in ev.baseline_kinds:
        report.baselines[f"A/{kind}"] = random_patch_baseline(
            clf, base_split, kind, ev.baseline_n, placement, natural, seed=a.seed,
            patch_size=(side, side), threshold_cfg=cfg.threshold_cfg(), workers=workers)

    if ev.transfer_models and cand.patch is not None:
        models = {"A": clf}
        for i, tm in enumerate(ev.transfer_models):
            sub = _classifier_section(cfg, tm.width, tm.seed, tm.epochs)
            d = train_classifier(sub, task)
            models[f"B{i}"] = clfs.load_classifier(d / "classifier.pt")
            report.classifiers.append({"name": f"B{i}", "dir": d.name,
                                       "clean_accuracy": models[f"B{i}"].meta.get("clean_accuracy")})
            report.baselines[f"B{i}/color"] = random_patch_baseline(
                models[f"B{i}"], base_split, "color", ev.baseline_n, placement, seed=a.seed,
                patch_size=(side, side), workers=workers)
        report.transfer = transfer_matrix({"A": cand.patch}, models, base_split, placement, workers)
        if mode == "targeted":
            report.annotations.append("transfer is measured untargeted for a targeted patch")

    report.metadata = {"wall_time_s": round(time.time() - t0, 3),
                       "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "workers": workers}
    report.to_json(out / "report.json")
    if ev.csv:
        report.to_csv(out / "csv")
    if ev.plots:
        if curves:
            plot_size_curves(curves, out / "size_curves.png")
        if report.locations:
            plot_location_table(report.locations["tnt"], out / "locations.png")
    return _finish(store, "report", out)


def load_report(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return json.loads(path.read_text())
