"""Grad-CAM saliency for the local classifier, plus group-average maps.

The saliency target is the pre-softmax logit of the chosen class, so the map
does not depend on the other classes' logits.  Channel weights are the
spatial averages of the logit's gradient w.r.t. the last conv block's
post-ReLU activations; the map is ReLU of the weighted activation sum,
bilinearly upsampled to the input frame and max-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimMismatch, EmptyGroup, NoConvLayer
from .model import Checkpoint, backward, forward_cache


@dataclass
class SaliencyMap:
    """A Grad-CAM activation map for one image and one target class."""

    grid: np.ndarray  # (H', W') conv-resolution, non-negative
    upsampled: np.ndarray  # (H, W) in [0, 1], max 1 unless identically zero
    target_class: int
    record_id: Optional[str] = None
    count: int = 1  # >1 for group averages

    def validate(self) -> None:
        if (self.grid < 0).any():
            raise ValueError("saliency grid must be non-negative")
        if self.upsampled.size and self.upsampled.max() > 0:
            if not np.isclose(self.upsampled.max(), 1.0):
                raise ValueError("upsampled map must be max-normalized")


def _upsample_bilinear(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = grid.shape
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[y0][:, x0] * (1 - wx) + grid[y0][:, x1] * wx
    bot = grid[y1][:, x0] * (1 - wx) + grid[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _normalize(m: np.ndarray) -> np.ndarray:
    peak = m.max()
    if peak <= 0:
        return np.zeros_like(m)
    return m / peak


def gradcam_weights(ckpt: Checkpoint, image, target_class: int) -> np.ndarray:
    """Channel weights: spatially averaged d(logit_target)/d(last conv activations)."""
    cache = forward_cache(ckpt, image[None] if np.asarray(image).ndim == 3 else image)
    d_logits = np.zeros_like(cache["logits"])
    d_logits[:, target_class] = 1.0
    _, d_conv = backward(ckpt, cache, d_logits=d_logits, want_conv_grad=True)
    return d_conv[0].mean(axis=(0, 1))


def gradcam(ckpt: Checkpoint, image, target_class: int,
            record_id: Optional[str] = None) -> SaliencyMap:
    """Grad-CAM map for one image.  Target is the class's pre-softmax logit."""
    if len(ckpt.config.conv_blocks) < 1:
        raise NoConvLayer("model has no convolutional layer")
    if not 0 <= target_class < ckpt.config.classes:
        raise ValueError(f"target_class {target_class} out of range")
    x = np.asarray(image)
    cache = forward_cache(ckpt, x[None] if x.ndim == 3 else x)
    d_logits = np.zeros_like(cache["logits"])
    d_logits[:, target_class] = 1.0
    _, d_conv = backward(ckpt, cache, d_logits=d_logits, want_conv_grad=True)

    activations = cache["last_conv"][0]  # (H', W', C)
    weights = d_conv[0].mean(axis=(0, 1))  # (C,)
    grid = np.maximum((activations * weights).sum(axis=2), 0.0)

    h, w = ckpt.config.input_hw
    upsampled = _normalize(_upsample_bilinear(grid, h, w))
    sal = SaliencyMap(grid=grid, upsampled=upsampled, target_class=target_class,
                      record_id=record_id)
    sal.validate()
    return sal


def group_average_map(maps, group_label: Optional[str] = None) -> SaliencyMap:
    """Pixelwise mean of saliency maps, re-normalized; count recorded."""
    maps = list(maps)
    if not maps:
        raise EmptyGroup("no saliency maps to average")
    shape = maps[0].upsampled.shape
    target = maps[0].target_class
    for m in maps[1:]:
        if m.upsampled.shape != shape:
            raise DimMismatch(
                f"map dims {m.upsampled.shape} != {shape}"
            )
        if m.target_class != target:
            raise DimMismatch("maps target different classes")
    mean_up = np.mean([m.upsampled for m in maps], axis=0)
    mean_grid = np.mean([m.grid for m in maps], axis=0)
    out = SaliencyMap(
        grid=mean_grid,
        upsampled=_normalize(mean_up),
        target_class=target,
        record_id=group_label,
        count=len(maps),
    )
    out.validate()
    return out


# Face zones as fractional rectangles of the normalized frame (rows, cols as
# fractions of height/width).  Forehead spans the full width; nose and mouth
# are narrower bands; everything else is periphery.
ZONES = {
    "forehead": ((0.10, 0.35), (0.00, 1.00)),
    "nose": ((0.35, 0.60), (0.35, 0.65)),
    "mouth": ((0.60, 0.75), (0.30, 0.70)),
}


def zone_masks(h: int, w: int) -> dict:
    """Boolean masks for each named zone plus the complementary periphery."""
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    masks = {}
    claimed = np.zeros((h, w), dtype=bool)
    for name, ((r0, r1), (c0, c1)) in ZONES.items():
        m = (
            (rows >= r0 * h) & (rows < r1 * h)
            & (cols >= c0 * w) & (cols < c1 * w)
            & ~claimed
        )
        masks[name] = m
        claimed |= m
    masks["periphery"] = ~claimed
    return masks


def region_profile(sal: SaliencyMap) -> dict:
    """Fraction of saliency mass falling in each face zone; sums to 1."""
    m = sal.upsampled
    h, w = m.shape
    total = m.sum()
    masks = zone_masks(h, w)
    if total <= 0:
        # no mass: attribute by area so the fractions still sum to 1
        return {name: mask.sum() / (h * w) for name, mask in masks.items()}
    return {name: float(m[mask].sum() / total) for name, mask in masks.items()}


def overlay_heatmap(img: np.ndarray, sal: SaliencyMap, alpha: float = 0.5) -> np.ndarray:
    """Render the map as a red-to-blue overlay on the source image (for export)."""
    m = sal.upsampled
    heat = np.zeros((*m.shape, 3))
    heat[:, :, 0] = m
    heat[:, :, 2] = 1.0 - m
    blended = (1 - alpha) * (img.astype(np.float64) / 255.0) + alpha * heat
    return np.floor(blended * 255 + 0.5).clip(0, 255).astype(np.uint8)


def save_saliency(sal: SaliencyMap, path) -> None:
    """Persist raw grids in an NPZ container."""
    np.savez(
        path,
        grid=sal.grid,
        upsampled=sal.upsampled,
        target_class=np.array(sal.target_class),
        count=np.array(sal.count),
    )


def load_saliency(path) -> SaliencyMap:
    data = np.load(path)
    return SaliencyMap(
        grid=data["grid"],
        upsampled=data["upsampled"],
        target_class=int(data["target_class"]),
        count=int(data["count"]),
    )
