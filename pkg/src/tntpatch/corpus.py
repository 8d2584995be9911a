"""Procedurally generated stand-in corpora.

``flowers`` is an unlabeled set of radial petal shapes on a dark background,
used to train the patch GAN in CI when no curated flower folder is around.
``shapes10`` is a 10-class labeled 32x32 task with the same tensor layout as
CIFAR-10, so the classifier and attack code can be exercised without the real
dataset. Neither is meant to look like the real thing; they are fixtures.
"""

from pathlib import Path

import numpy as np
from PIL import Image

SHAPES10_LABELS = (
    "disk",
    "square",
    "triangle",
    "cross",
    "hstripes",
    "vstripes",
    "diagonal",
    "checker",
    "ring",
    "dots",
)


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def flower(size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``(size, size, 3)`` float image of a flower-like blob."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = (size - 1) / 2 + rng.uniform(-0.06, 0.06, 2) * size
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx) / (size / 2)
    theta = np.arctan2(dy, dx)
    n_petals = rng.integers(4, 9)
    phase = rng.uniform(0, 2 * np.pi)
    radius = rng.uniform(0.65, 0.95)
    sharp = rng.uniform(0.3, 0.8)
    petal_edge = radius * (sharp + (1 - sharp) * np.abs(np.cos(n_petals * (theta + phase) / 2)))
    petal = r < petal_edge
    core = r < rng.uniform(0.15, 0.3)

    img = np.zeros((size, size, 3))
    img[:] = rng.uniform(0.0, 0.06, 3)  # dark backdrop, below the default mask threshold
    hue = rng.uniform(0, 1)
    base = np.array(_hsv_to_rgb(hue, rng.uniform(0.5, 1.0), rng.uniform(0.7, 1.0)))
    shade = (0.6 + 0.4 * (1 - r / np.maximum(petal_edge, 1e-6)))[..., None]
    img[petal] = (base * shade)[petal]
    core_col = np.array(_hsv_to_rgb(rng.uniform(0.08, 0.16), 0.9, rng.uniform(0.6, 1.0)))
    img[core] = core_col
    img += rng.normal(0, 0.02, img.shape)
    return img.clip(0, 1)


def flowers(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.stack([flower(size, rng) for _ in range(n)])


def write_flower_corpus(path, n: int = 64, size: int = 64, seed: int = 0) -> Path:
    """Write ``n`` PNG flowers into ``path`` (created if needed)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(flowers(n, size, seed)):
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path / f"flower_{i:04d}.png")
    return path


def _smooth_background(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    a, b = rng.uniform(0.1, 0.9, (2, 3))
    w = rng.uniform(-1, 1, 2)
    t = (w[0] * yy + w[1] * xx + 1.5) / 3.0
    return a * (1 - t[..., None]) + b * t[..., None]


def _shape_mask(label, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    s = rng.uniform(0.22, 0.34) * size
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    period = rng.uniform(3.5, 5.5)
    if label == 0:
        return r < s
    if label == 1:
        return (np.abs(dy) < s * 0.85) & (np.abs(dx) < s * 0.85)
    if label == 2:
        return (dy < s * 0.8) & (dy > -s) & (np.abs(dx) < (dy + s) * 0.6)
    if label == 3:
        arm = s * 0.3
        return ((np.abs(dy) < arm) & (np.abs(dx) < s)) | ((np.abs(dx) < arm) & (np.abs(dy) < s))
    if label == 4:
        return np.sin(2 * np.pi * yy / period) > 0
    if label == 5:
        return np.sin(2 * np.pi * xx / period) > 0
    if label == 6:
        return np.sin(2 * np.pi * (xx + yy) / (period * 1.4)) > 0
    if label == 7:
        c = period
        return ((yy // c) + (xx // c)) % 2 == 0
    if label == 8:
        return (r < s) & (r > s * 0.55)
    if label == 9:
        c = period * 1.3
        return np.hypot((yy % c) - c / 2, (xx % c) - c / 2) < c * 0.28
    raise ValueError(label)


def shapes10(n: int, size: int = 32, seed: int = 0):
    """Labeled synthetic task: returns ``(images uint8 (n, 3, size, size), labels)``.

    Labels are balanced round-robin then shuffled.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    rng.shuffle(labels)
    out = np.empty((n, size, size, 3))
    for i, lab in enumerate(labels):
        img = _smooth_background(size, rng)
        fg = np.array(_hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.4, 1.0), rng.uniform(0.3, 1.0)))
        mask = _shape_mask(int(lab), size, rng)
        img[mask] = 0.25 * img[mask] + 0.75 * fg
        img += rng.normal(0, 0.04, img.shape)
        out[i] = img.clip(0, 1)
    images = np.round(out * 255).astype(np.uint8).transpose(0, 3, 1, 2)
    return images, labels.astype(np.int64)
