"""Raster helpers shared by the embedding and data pipelines."""

from __future__ import annotations

import numpy as np

from .saliency import BoundingBox, as_float_image


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resampling of an ``H x W x C`` array."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    if (H, W) == (out_h, out_w):
        return img.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis_weights(H, out_h)
    x0, x1, fx = axis_weights(W, out_w)
    fy = fy[:, None, None] if img.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if img.ndim == 3 else fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_resize(image: np.ndarray, box: BoundingBox, size: int) -> np.ndarray:
    img = as_float_image(image)
    return resize_bilinear(img[box.y:box.y + box.h, box.x:box.x + box.w], size, size)


def to_chw(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_float_image(image).transpose(2, 0, 1))


# pixel-space augmentations of the handcrafted baseline, applied to CHW arrays
HANDCRAFTED = (
    ("hflip", lambda x: x[:, :, ::-1]),
    ("rot90", lambda x: np.rot90(x, 1, axes=(1, 2))),
    ("rot270", lambda x: np.rot90(x, -1, axes=(1, 2))),
    ("rot180", lambda x: np.rot90(x, 2, axes=(1, 2))),
)
