"""Image algebra for building and applying patches.

All public functions work on numpy images laid out ``(height, width, 3)`` with
values in ``[0, 1]``. The ``*_tensor`` variants implement the same operations on
torch batches ``(N, 3, H, W)`` so that the attack code can backpropagate through
placement and stamping. Both paths share the same geometry helpers, so a patch
placed with :func:`place` lands on exactly the pixels :func:`place_tensor` uses.

Stamping happens in raw pixel space, before any classifier normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import EmptyPatch, PlacementOverflow, ShapeError

LOCATIONS = (
    "lower_right",
    "upper_right",
    "upper_left",
    "lower_left",
    "center",
    "top",
    "bottom",
    "left",
    "right",
    "custom",
)
# eight border positions plus the center
CANONICAL_LOCATIONS = LOCATIONS[:-1]

PATCH_SOURCES = ("generator_sample", "finetuned_sample", "external_file")


@dataclass(frozen=True)
class ThresholdConfig:
    """How foreground is separated from background in a generated patch.

    ``mode="fixed"`` keeps pixels whose luminance (mean over RGB) is strictly
    above ``threshold``. ``mode="otsu"`` picks the threshold with Otsu's method
    on the luminance histogram instead.
    """

    mode: str = "fixed"
    threshold: float = 0.1

    def __post_init__(self):
        if self.mode not in ("fixed", "otsu"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")


@dataclass(frozen=True)
class Placement:
    """Where and how large a patch is stamped.

    ``scale_fraction`` is patch area divided by image area. ``None`` keeps the
    patch at its native pixel size. ``row``/``col`` are only read for
    ``location="custom"`` and give the top-left corner of the footprint.
    """

    location: str = "lower_right"
    scale_fraction: Optional[float] = None
    row: Optional[int] = None
    col: Optional[int] = None

    def __post_init__(self):
        if self.location not in LOCATIONS:
            raise ValueError(f"unknown location {self.location!r}")
        if self.scale_fraction is not None and not 0.0 < self.scale_fraction <= 1.0:
            raise ValueError("scale_fraction must lie in (0, 1]")
        if self.location == "custom" and (self.row is None or self.col is None):
            raise ValueError("custom placement needs row and col")

    @property
    def name(self) -> str:
        if self.location == "custom":
            return f"custom({self.row},{self.col})"
        return self.location

    def with_scale(self, scale_fraction):
        return replace(self, scale_fraction=scale_fraction)

    def with_location(self, location, row=None, col=None):
        return replace(self, location=location, row=row, col=col)


@dataclass
class Patch:
    delta: np.ndarray
    mask: np.ndarray
    source: str = "generator_sample"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = validate_image(self.delta)
        self.mask = validate_mask(self.mask)
        if self.mask.shape != self.delta.shape[:2]:
            raise ShapeError(
                f"mask {self.mask.shape} does not match delta {self.delta.shape[:2]}"
            )
        if self.source not in PATCH_SOURCES:
            raise ValueError(f"unknown patch source {self.source!r}")

    @property
    def size(self) -> Tuple[int, int]:
        return self.delta.shape[0], self.delta.shape[1]


def validate_image(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        raise TypeError(f"images are float arrays in [0, 1], got {x.dtype}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return x


def validate_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected an (H, W) mask, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return m.astype(np.uint8)


def luminance(delta: np.ndarray) -> np.ndarray:
    return np.asarray(delta).mean(axis=-1)


def _otsu(lum: np.ndarray) -> float:
    from skimage.filters import threshold_otsu

    return float(threshold_otsu(lum))


def compute_mask(delta, threshold_cfg: ThresholdConfig = ThresholdConfig()) -> np.ndarray:
    """Binary foreground mask of ``delta``.

    Raises :class:`EmptyPatch` when no pixel qualifies as foreground.
    """
    delta = validate_image(delta)
    lum = luminance(delta)
    if threshold_cfg.mode == "otsu":
        thr = _otsu(lum)
    else:
        thr = threshold_cfg.threshold
    mask = (lum > thr).astype(np.uint8)
    if not mask.any():
        raise EmptyPatch("no foreground pixel above threshold")
    return mask


def remove_background(patch: Patch) -> Patch:
    delta = patch.delta * patch.mask[..., None].astype(patch.delta.dtype)
    return replace(patch, delta=delta, meta=dict(patch.meta))


def make_patch(delta, threshold_cfg=ThresholdConfig(), source="generator_sample", **meta) -> Patch:
    """Threshold ``delta`` and strip its background in one step."""
    mask = compute_mask(delta, threshold_cfg)
    return remove_background(Patch(np.asarray(delta), mask, source, dict(meta)))


# -- geometry ---------------------------------------------------------------


def scaled_size(patch_h: int, patch_w: int, placement: Placement, canvas_h: int, canvas_w: int):
    """Footprint ``(h, w)`` of a patch after scaling, keeping its aspect ratio."""
    if placement.scale_fraction is None:
        return patch_h, patch_w
    s = math.sqrt(placement.scale_fraction * canvas_h * canvas_w / (patch_h * patch_w))
    return max(1, int(round(patch_h * s))), max(1, int(round(patch_w * s)))


def footprint(patch_h, patch_w, placement: Placement, canvas_h, canvas_w):
    """Return ``(top, left, h, w)`` of the placed patch on the canvas.

    Origin is the top-left pixel; corner placements sit flush with the border.
    """
    h, w = scaled_size(patch_h, patch_w, placement, canvas_h, canvas_w)
    if h > canvas_h or w > canvas_w:
        raise PlacementOverflow(
            f"{h}x{w} patch does not fit on a {canvas_h}x{canvas_w} canvas"
        )
    loc = placement.location
    mid_r, mid_c = (canvas_h - h) // 2, (canvas_w - w) // 2
    end_r, end_c = canvas_h - h, canvas_w - w
    offsets = {
        "upper_left": (0, 0),
        "upper_right": (0, end_c),
        "lower_left": (end_r, 0),
        "lower_right": (end_r, end_c),
        "center": (mid_r, mid_c),
        "top": (0, mid_c),
        "bottom": (end_r, mid_c),
        "left": (mid_r, 0),
        "right": (mid_r, end_c),
    }
    if loc == "custom":
        top, left = placement.row, placement.col
        if top < 0 or left < 0 or top + h > canvas_h or left + w > canvas_w:
            raise PlacementOverflow(
                f"custom placement at ({top}, {left}) leaves the {canvas_h}x{canvas_w} canvas"
            )
    else:
        top, left = offsets[loc]
    return top, left, h, w


def place_tensor(delta, mask, placement: Placement, canvas_h: int, canvas_w: int):
    """Differentiable placement of a batch of patches.

    ``delta`` is ``(B, 3, h, w)``, ``mask`` is ``(B, 1, h, w)`` with values in
    {0, 1}. Returns full-canvas ``(B, 3, H, W)`` and ``(B, 1, H, W)`` tensors,
    zero outside the footprint. Gradients flow into ``delta`` only.
    """
    if delta.dim() != 4 or mask.dim() != 4 or delta.shape[-2:] != mask.shape[-2:]:
        raise ShapeError("delta (B,3,h,w) and mask (B,1,h,w) must share spatial size")
    ph, pw = delta.shape[-2:]
    top, left, h, w = footprint(ph, pw, placement, canvas_h, canvas_w)
    mask = mask.to(delta.dtype)
    if (h, w) != (ph, pw):
        delta = F.interpolate(delta, size=(h, w), mode="bilinear", align_corners=False)
        mask = F.interpolate(mask.detach(), size=(h, w), mode="nearest")
        mask = (mask >= 0.5).to(delta.dtype)
    pad = (left, canvas_w - left - w, top, canvas_h - top - h)
    return F.pad(delta, pad), F.pad(mask.detach(), pad)


def place(patch: Patch, placement: Placement, canvas_h: int, canvas_w: int):
    """Place ``patch`` on an empty ``canvas_h x canvas_w`` canvas.

    Returns ``(placed_delta, placed_mask)`` as numpy arrays. Resizing is
    bilinear for the image and nearest-neighbour for the mask, which is then
    re-binarized at 0.5.
    """
    ph, pw = patch.size
    top, left, h, w = footprint(ph, pw, placement, canvas_h, canvas_w)
    delta_out = np.zeros((canvas_h, canvas_w, 3), dtype=patch.delta.dtype)
    mask_out = np.zeros((canvas_h, canvas_w), dtype=np.uint8)
    if (h, w) == (ph, pw):
        d, m = patch.delta, patch.mask
    else:
        dt = torch.from_numpy(np.ascontiguousarray(patch.delta.transpose(2, 0, 1)))[None]
        mt = torch.from_numpy(patch.mask.astype(dt.numpy().dtype))[None, None]
        d = F.interpolate(dt, size=(h, w), mode="bilinear", align_corners=False)
        d = d[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0)
        m = F.interpolate(mt, size=(h, w), mode="nearest")[0, 0].numpy()
        m = (m >= 0.5).astype(np.uint8)
    delta_out[top : top + h, left : left + w] = d
    mask_out[top : top + h, left : left + w] = m
    return delta_out, mask_out


def stamp(x, placed_delta, placed_mask) -> np.ndarray:
    """Compose ``(1 - m) * x + m * delta``, clipped to ``[0, 1]``.

    Pixels where the mask is 0 come back bit-identical to ``x``.
    """
    x = validate_image(x)
    placed_delta = validate_image(placed_delta)
    placed_mask = validate_mask(placed_mask)
    if x.shape != placed_delta.shape or x.shape[:2] != placed_mask.shape:
        raise ShapeError(
            f"stamp needs matching shapes, got x {x.shape}, delta {placed_delta.shape}, "
            f"mask {placed_mask.shape}"
        )
    m = placed_mask[..., None].astype(x.dtype)
    out = (1 - m) * x + m * placed_delta.astype(x.dtype)
    return np.clip(out, 0.0, 1.0)


def stamp_tensor(x, placed_delta, placed_mask):
    """Batch version of :func:`stamp` on ``(N, 3, H, W)`` tensors.

    ``placed_delta``/``placed_mask`` may carry a batch dimension of 1 and are
    broadcast across ``x``.
    """
    if x.shape[-2:] != placed_delta.shape[-2:] or x.shape[-2:] != placed_mask.shape[-2:]:
        raise ShapeError("stamp_tensor needs matching spatial sizes")
    out = (1 - placed_mask) * x + placed_mask * placed_delta
    return out.clamp(0.0, 1.0)


def mask_tensor(delta, threshold_cfg: ThresholdConfig = ThresholdConfig()):
    """Masks for a ``(B, 3, h, w)`` batch; returned detached, shape ``(B, 1, h, w)``.

    Thresholding has no useful derivative, so the mask is treated as a constant
    during backpropagation.
    """
    with torch.no_grad():
        lum = delta.mean(dim=1, keepdim=True)
        if threshold_cfg.mode == "otsu":
            thr = torch.tensor(
                [_otsu(l[0].cpu().numpy()) for l in lum], dtype=lum.dtype
            ).view(-1, 1, 1, 1)
        else:
            thr = threshold_cfg.threshold
        return (lum > thr).to(delta.dtype)


def apply_patch_batch(images, patch: Patch, placement: Placement):
    """Stamp one numpy patch onto a ``(N, 3, H, W)`` tensor batch."""
    H, W = images.shape[-2:]
    d, m = place(patch, placement, H, W)
    dt = torch.from_numpy(np.ascontiguousarray(d.transpose(2, 0, 1))).to(images.dtype)[None]
    mt = torch.from_numpy(m).to(images.dtype)[None, None]
    return stamp_tensor(images, dt, mt)


# -- interchange --------------------------------------------------------------


def save_patch(path, patch: Patch) -> Path:
    """Write an 8-bit RGBA PNG: RGB holds delta, alpha holds mask * 255."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = np.round(patch.delta * 255.0).astype(np.uint8)
    alpha = (patch.mask * 255).astype(np.uint8)[..., None]
    PILImage.fromarray(np.concatenate([rgb, alpha], axis=-1), mode="RGBA").save(path)
    return path


def load_patch(path, source="external_file") -> Patch:
    arr = np.asarray(PILImage.open(path).convert("RGBA"))
    delta = arr[..., :3].astype(np.float64) / 255.0
    mask = (arr[..., 3] >= 128).astype(np.uint8)
    return Patch(delta, mask, source, {"path": str(path)})


def quantize(delta: np.ndarray) -> np.ndarray:
    """Snap a float image onto the 8-bit grid used by :func:`save_patch`."""
    return np.round(np.asarray(delta) * 255.0) / 255.0
