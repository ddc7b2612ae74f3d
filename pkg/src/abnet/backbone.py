"""Shared four-block convolutional embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imaging import crop_resize, to_chw
from .nn import ConvBlock, Module, Tensor
from .saliency import BoundingBox, PatchSet, as_float_image

PADDINGS = (0, 0, 1, 1)
POOLS = (True, True, False, False)
MIN_INPUT = 10


def feature_size(input_size: int) -> int:
    """Spatial side of the feature map for a square input of ``input_size``."""
    s = input_size
    for pad, pool in zip(PADDINGS, POOLS):
        s = s + 2 * pad - 2
        if s < 1:
            raise ValueError(f"input size {input_size} too small for the embedding chain")
        if pool:
            if s < 2:
                raise ValueError(f"input size {input_size} too small for the embedding chain")
            s //= 2
    return s


@dataclass
class FeatureMap:
    tensor: Tensor
    source: str  # "global" or "patch<i>"


@dataclass
class FeatureSet:
    global_map: FeatureMap
    patches: list[FeatureMap]


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, channels: int = 64, in_channels: int = 3):
        self.channels = channels
        self.blocks = [
            ConvBlock(rng, in_channels if i == 0 else channels, channels, PADDINGS[i], POOLS[i])
            for i in range(4)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        size = x.shape[-1]
        if x.shape[-2] < MIN_INPUT or size < MIN_INPUT:
            raise ValueError(f"input {x.shape[-2]}x{size} is below the minimum {MIN_INPUT}x{MIN_INPUT}")
        for block in self.blocks:
            x = block(x)
        return x


def patch_rasters(image: np.ndarray, patch_set: PatchSet, size: int) -> np.ndarray:
    """``[1 + N, 3, size, size]``: the whole image followed by each resized crop."""
    img = as_float_image(image)
    whole = crop_resize(img, _full_box(img), size)
    crops = [crop_resize(img, box, size) for box in patch_set.boxes]
    return np.stack([to_chw(whole)] + [to_chw(c) for c in crops])


def _full_box(img: np.ndarray) -> BoundingBox:
    return BoundingBox(0, 0, img.shape[1], img.shape[0])


def embed(raster, backbone: Backbone) -> FeatureMap:
    """Embed one ``[3, S, S]`` raster (or an ``S x S x 3`` image)."""
    arr = np.asarray(raster, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] == 3 and arr.shape[0] != 3:
        arr = to_chw(arr)
    return FeatureMap(backbone(Tensor(arr)), "global")


def embed_set(image: np.ndarray, patch_set: PatchSet, backbone: Backbone, size: int) -> FeatureSet:
    """Embed the whole image and every patch with one shared parameter set."""
    rasters = patch_rasters(image, patch_set, size)
    out = backbone(Tensor(rasters))
    maps = [out[i] for i in range(out.shape[0])]
    return FeatureSet(FeatureMap(maps[0], "global"), [FeatureMap(m, f"patch{i}") for i, m in enumerate(maps[1:])])


def embed_batch(rasters: Sequence[np.ndarray] | np.ndarray, backbone: Backbone) -> Tensor:
    return backbone(Tensor(np.asarray(rasters, dtype=np.float64)))
