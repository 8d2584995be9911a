"""
Searching a generator for an adversarial patch
==============================================

The attack never edits pixels directly. It moves through the latent space of
a generator trained on natural images, so every candidate patch still looks
like something the generator can draw. This demo runs the whole loop at toy
scale on CPU in about a minute:

1. train a small WGAN-GP on the bundled flower drawings,
2. train a small classifier on the synthetic ``shapes10`` task,
3. search latent space for a patch that makes the classifier err,
4. compare against random solid-color patches of the same size.

The numbers are only a smoke test. The classifier is weak and the generator
is barely trained, so a random patch already fools it fairly often.
"""
import logging

from tntpatch.classifiers import TrainConfig, channel_stats, cifar10_arch, load_shapes10, train_classifier
from tntpatch.evaluation import attack_success_rate, make_splits, random_patch_baseline
from tntpatch.gan_training import GanTrainConfig, load_unlabeled_dataset, train_wgan_gp
from tntpatch.patch_ops import Placement
from tntpatch.tnt_search import AttackConfig, search_tnt

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

##############################################################################
# A generator of flower-like patches

corpus = load_unlabeled_dataset("builtin:flowers:512", 32)
gan_cfg = GanTrainConfig(latent_dim=64, output_size=32, width=16, batch_size=32, total_steps=300, seed=0)
generator = train_wgan_gp(corpus, gan_cfg)

##############################################################################
# A victim classifier

train, test = load_shapes10(3000, seed=1), load_shapes10(1000, seed=2)
mean, std = channel_stats(train)
clf = train_classifier(cifar10_arch(), train, TrainConfig(epochs=4, batch_size=64, width=0.125, mean=mean,
                                                          std=std), test, train.label_names)
print(f"clean accuracy {clf.meta['clean_accuracy']:.3f}")

##############################################################################
# Latent search
# -------------
# Each restart draws a fresh latent and takes signed gradient steps. It stops
# once a training batch is fooled often enough *and* a held-out split agrees.

splits = make_splits(test, (100, 1000), seed=0)
placement = Placement("lower_right", 0.2)
cfg = AttackConfig(mode="untargeted", epsilon=0.05, n_iter=30, tau_batch=0.6, tau_val=0.5,
                   placement=placement, max_restarts=10)
cand = search_tnt(generator, clf, train, cfg, splits["split_1000"])
print(f"converged={cand.converged} after {cand.restarts_used} restarts, val ASR {cand.val_asr}")

##############################################################################
# Against random patches

if cand.patch is not None:
    asr = attack_success_rate(clf, splits["full"], cand.patch, placement, "untargeted").asr
    side = round(0.2 ** 0.5 * 32)
    base = random_patch_baseline(clf, splits["split_1000"], "color", 16, placement, patch_size=(side, side))
    print(f"searched patch ASR {asr:.3f}; random color patches {base.mean:.3f} +- {base.std:.3f}")
