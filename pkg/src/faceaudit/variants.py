"""Adversarial image filters: RGB noise, Spread, Greyscale, mask occlusion.

Every filter is a pure function of (input bytes, parameters, seed).  Seeds
feed a counter-based generator, so regenerating a corpus yields bit-identical
images regardless of processing order or parallelism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng
from .corpus import FaceRecord, Manifest, VariantKind
from .errors import BadAmplitude, BadRadius, FaceNotFound
from .images import as_image, load_image, save_png

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba present in normal installs
    _HAVE_NUMBA = False


def noise_bound(amplitude: float) -> int:
    """Per-channel integer noise bound for an amplitude: round(a * 255)."""
    return int(np.floor(amplitude * 255 + 0.5))


def rgb_noise(img, amplitude: float, seed: int) -> np.ndarray:
    """Add per-pixel, per-channel uniform integer noise in [-b, b], b = round(a*255).

    Each channel value gets an independent draw from the Philox stream keyed
    by the seed; output is clamped to [0, 255].
    """
    img = as_image(img)
    if not 0.0 < amplitude <= 1.0:
        raise BadAmplitude(f"amplitude must lie in (0, 1]: {amplitude}")
    b = noise_bound(amplitude)
    if b == 0:
        return img.copy()
    g = rng.generator(seed, "rgb_noise")
    noise = g.integers(-b, b + 1, size=img.shape, dtype=np.int16)
    return np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8)


def _spread_partners(h: int, w: int, radius: int, seed: int) -> np.ndarray:
    """Swap partner index for each pixel, uniform within Chebyshev radius, clamped."""
    g = rng.generator(seed, "spread")
    offsets = g.integers(-radius, radius + 1, size=(h * w, 2), dtype=np.int64)
    rows = np.repeat(np.arange(h, dtype=np.int64), w)
    cols = np.tile(np.arange(w, dtype=np.int64), h)
    qr = np.clip(rows + offsets[:, 0], 0, h - 1)
    qc = np.clip(cols + offsets[:, 1], 0, w - 1)
    return qr * w + qc


def _apply_swaps_python(flat: np.ndarray, partners: np.ndarray) -> None:
    for p in range(partners.shape[0]):
        q = partners[p]
        if q != p:
            tmp = flat[p].copy()
            flat[p] = flat[q]
            flat[q] = tmp


if _HAVE_NUMBA:

    @njit(cache=True)
    def _apply_swaps_numba(flat, partners):  # pragma: no cover - jitted
        for p in range(partners.shape[0]):
            q = partners[p]
            if q != p:
                for c in range(flat.shape[1]):
                    tmp = flat[p, c]
                    flat[p, c] = flat[q, c]
                    flat[q, c] = tmp

    _apply_swaps = _apply_swaps_numba
else:
    _apply_swaps = _apply_swaps_python


def spread(img, radius: int, seed: int) -> np.ndarray:
    """Displace pixels by a seeded sequence of local swaps (blur-like effect).

    Each position p, visited in raster order, swaps with a uniformly chosen
    position within Chebyshev distance `radius` (clamped to bounds).  The
    multiset of pixel values is exactly preserved.
    """
    img = as_image(img)
    if radius < 1:
        raise BadRadius(f"radius must be >= 1: {radius}")
    h, w = img.shape[:2]
    partners = _spread_partners(h, w, radius, seed)
    flat = img.reshape(h * w, 3).copy()
    _apply_swaps(flat, partners)
    return flat.reshape(h, w, 3)


# ITU-R BT.601 luma weights, round half up.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def greyscale(img) -> np.ndarray:
    """Replace each pixel with its luma: y = round(.299 R + .587 G + .114 B)."""
    img = as_image(img)
    wr, wg, wb = LUMA_WEIGHTS
    y = np.floor(
        wr * img[:, :, 0] + wg * img[:, :, 1] + wb * img[:, :, 2] + 0.5
    ).astype(np.uint8)
    return np.repeat(y[:, :, None], 3, axis=2)


# Flat N95 blue; shading ramps brightness from 1.0 at the polygon top to
# SHADE_FLOOR at the bottom.
MASK_COLOR = (82, 113, 190)
SHADE_FLOOR = 0.72

LANDMARK_NAMES = (
    "nose_bridge_l",
    "nose_bridge_r",
    "cheek_r",
    "chin_r",
    "chin_l",
    "cheek_l",
)


@dataclass(frozen=True)
class MaskGeometry:
    """Mask polygon anchored at six facial landmarks.

    Landmarks are (x, y) pixel coordinates keyed by LANDMARK_NAMES; the
    polygon is the anchors in that (clockwise) order.
    """

    landmarks: dict
    mask_color: tuple = MASK_COLOR

    def __post_init__(self):
        missing = set(LANDMARK_NAMES) - set(self.landmarks)
        if missing:
            raise ValueError(f"missing landmarks: {sorted(missing)}")

    def polygon(self) -> np.ndarray:
        """Ordered (x, y) vertex array."""
        return np.array([self.landmarks[n] for n in LANDMARK_NAMES], dtype=np.float64)


def polygon_interior(poly: np.ndarray, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of pixels whose centers lie inside the polygon.

    Even-odd crossing test against pixel centers (x + 0.5, y + 0.5).
    """
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros((h, w), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        cond = (py >= min(y0, y1)) & (py < max(y0, y1))
        x_at = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        inside ^= cond & (px < x_at)
    return inside


def apply_mask(img, geometry: MaskGeometry) -> np.ndarray:
    """Paint the mask polygon over the face with a vertical shading ramp.

    Pixels outside the polygon are untouched.  A degenerate (zero-area)
    polygon leaves the image unchanged.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    poly = geometry.polygon()
    interior = polygon_interior(poly, h, w)
    if not interior.any():
        return img.copy()

    rows = np.nonzero(interior.any(axis=1))[0]
    top, bottom = rows[0], rows[-1]
    span = max(bottom - top, 1)
    shade = 1.0 - (1.0 - SHADE_FLOOR) * (np.arange(h) - top) / span
    shade = np.clip(shade, SHADE_FLOOR, 1.0)

    out = img.copy()
    color = np.array(geometry.mask_color, dtype=np.float64)
    shaded = np.floor(shade[:, None] * color[None, :] + 0.5).astype(np.uint8)
    out[interior] = shaded[np.nonzero(interior)[0]]
    return out


# A landmark provider maps an image array to a MaskGeometry, raising
# FaceNotFound when it cannot locate a face.  Real face landmarking is an
# external pluggable component; this default places a mask geometrically in
# the lower-center of the frame, which is correct for normalized face crops.
LandmarkProvider = Callable[[np.ndarray], MaskGeometry]


def frame_relative_landmarks(img) -> MaskGeometry:
    img = as_image(img)
    h, w = img.shape[:2]

    def pt(fx, fy):
        return (fx * w, fy * h)

    return MaskGeometry(
        landmarks={
            "nose_bridge_l": pt(0.38, 0.48),
            "nose_bridge_r": pt(0.62, 0.48),
            "cheek_r": pt(0.82, 0.60),
            "chin_r": pt(0.66, 0.84),
            "chin_l": pt(0.34, 0.84),
            "cheek_l": pt(0.18, 0.60),
        }
    )


FILTER_KINDS = ("RGB", "GREY", "SPRD", "MASK")


def apply_variant(img, kind: VariantKind, landmark_provider: LandmarkProvider = frame_relative_landmarks) -> np.ndarray:
    """Dispatch one filter.  The kind must carry its seed where applicable."""
    if kind.kind == "RGB":
        return rgb_noise(img, kind.amplitude, kind.seed)
    if kind.kind == "SPRD":
        return spread(img, kind.radius, kind.seed)
    if kind.kind == "GREY":
        return greyscale(img)
    if kind.kind == "MASK":
        return apply_mask(img, landmark_provider(img))
    raise ValueError(f"not a filter kind: {kind.kind}")


@dataclass
class GenerationSummary:
    """Per-run record of generated variants and per-image failures."""

    generated: int = 0
    failures: list = field(default_factory=list)  # (identity_id, kind label, reason)

    def to_dict(self):
        return {
            "generated": self.generated,
            "failures": [
                {"identity_id": i, "kind": k, "reason": r}
                for i, k, r in self.failures
            ],
        }


def generate_variants(
    manifest: Manifest,
    kinds,
    out_dir,
    master_seed: int = 0,
    landmark_provider: LandmarkProvider = frame_relative_landmarks,
    log_path=None,
):
    """Produce variant images and an augmented manifest.

    One output record per (ORIG identity, requested kind).  Per-image seeds
    are derived from (master_seed, identity_id, kind label), so regeneration
    is byte-stable even if the manifest is reordered.  Images that fail a
    filter (e.g. no face for MASK) are kept out of that variant set only and
    reported in the summary.
    """
    out_dir = Path(out_dir)
    new_records = []
    summary = GenerationSummary()
    log_lines = []
    for rec in manifest.select(variant_label="ORIG"):
        img = load_image(rec.image_ref)
        for kind in kinds:
            seeded = kind.with_seed(
                rng.derive_seed(master_seed, rec.identity_id, kind.label)
            )
            try:
                out = apply_variant(img, seeded, landmark_provider)
            except FaceNotFound as exc:
                summary.failures.append((rec.identity_id, kind.label, str(exc)))
                log_lines.append(
                    {"identity_id": rec.identity_id, "kind": kind.label,
                     "status": "face_not_found"}
                )
                continue
            path = out_dir / kind.label / f"{rec.identity_id}.png"
            save_png(out, path)
            new_records.append(
                FaceRecord(
                    record_id=f"{rec.identity_id}:{kind.label}",
                    identity_id=rec.identity_id,
                    display_name=rec.display_name,
                    country=rec.country,
                    gender=rec.gender,
                    variant=seeded,
                    image_ref=str(path),
                    width=out.shape[1],
                    height=out.shape[0],
                )
            )
            summary.generated += 1
            log_lines.append(
                {"identity_id": rec.identity_id, "kind": kind.label, "status": "ok",
                 "path": str(path)}
            )
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", encoding="utf-8") as fh:
            for line in log_lines:
                fh.write(json.dumps(line) + "\n")
    augmented = Manifest(
        records=list(manifest.records) + new_records,
        provenance=manifest.provenance,
    )
    return augmented, summary
