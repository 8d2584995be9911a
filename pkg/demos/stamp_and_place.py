"""
Stamping a patch
================

A patch is an RGB image plus a binary mask. Stamping copies the masked
pixels onto the target image and leaves everything else untouched. This
script cuts a patch out of one of the procedurally drawn flowers that ship
with the package, then stamps it at each of the nine canonical locations of
a test image.

Run it with ``python demos/stamp_and_place.py``; the figure is written to
``demo_out/placements.png``.
"""
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from tntpatch.classifiers import load_shapes10
from tntpatch.evaluation import canonical_placements
from tntpatch.gan_training import load_unlabeled_dataset
from tntpatch.patch_ops import ThresholdConfig, make_patch, place, save_patch, stamp

out = Path("demo_out")
out.mkdir(exist_ok=True)

##############################################################################
# Cut the patch
# -------------
# The mask keeps pixels whose channel mean is above the threshold, so the
# dark background around the flower drops out.

flowers = load_unlabeled_dataset("builtin:flowers:16", 32)
delta = flowers.images[3].numpy().transpose(1, 2, 0)
patch = make_patch(delta, ThresholdConfig("fixed", 0.1))
print(f"patch keeps {patch.mask.mean():.0%} of its pixels")
save_patch(out / "flower_patch.png", patch)

##############################################################################
# Stamp it everywhere
# -------------------
# ``place`` resizes the patch so it covers 20% of the image area and puts it
# on an empty canvas. ``stamp`` then composes patch and image.

image = load_shapes10(1, seed=0).get(slice(0, 1))[0].numpy().transpose(1, 2, 0)
fig, axes = plt.subplots(3, 3, figsize=(6, 6))
for ax, placement in zip(axes.ravel(), canonical_placements(0.2)):
    placed, mask = place(patch, placement, *image.shape[:2])
    ax.imshow(stamp(image, placed, mask))
    ax.set_title(placement.name, fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "placements.png", dpi=120)

# pixels outside the mask are never touched
placed, mask = place(patch, canonical_placements(0.2)[0], *image.shape[:2])
assert np.array_equal(stamp(image, placed, mask)[mask == 0], image[mask == 0])
print("wrote", out / "placements.png")
