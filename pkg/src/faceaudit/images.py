"""8-bit RGB image buffers and resampling.

Images are numpy arrays of shape (height, width, 3), dtype uint8, row-major.
The resampling kernel used everywhere in the toolkit is bilinear with
pixel-center alignment: destination pixel (x, y) samples the source at
((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5).  When source and destination
sizes are equal this is the identity map, so no-op resizes are byte-exact.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnreadableImage

# Canonical face frame after normalization.
FRAME_WIDTH = 200
FRAME_HEIGHT = 256


def as_image(arr) -> np.ndarray:
    """Validate an (H, W, 3) uint8 buffer and return it."""
    a = np.asarray(arr)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {a.shape}")
    if a.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {a.dtype}")
    return a


def load_image(path) -> np.ndarray:
    """Decode a JPEG/PNG file to an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc


def save_png(img, path) -> None:
    """Write an image losslessly as PNG (golden tests rely on bit-exactness)."""
    img = as_image(img)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def bilinear_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Resample to (out_h, out_w) with the pixel-center bilinear kernel."""
    img = as_image(img)
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]

    src = img.astype(np.float64)
    top = src[y0][:, x0] * (1 - wx) + src[y0][:, x1] * wx
    bot = src[y1][:, x0] * (1 - wx) + src[y1][:, x1] * wx
    out = top * (1 - wy) + bot * wy
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)
