"""Training-time geometric augmentation: random flips and a central multi-scale crop."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..diffcore import resize_array
from ..levelset import signed_distance
from .io import Sample

CROP_SCALES = (0.8, 0.9, 1.0)


def nearest_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[rows][:, cols]


def central_crop(array: np.ndarray, scale: float) -> np.ndarray:
    h, w = array.shape[:2]
    ch, cw = int(round(h * scale)), int(round(w * scale))
    top, left = (h - ch) // 2, (w - cw) // 2
    return array[top : top + ch, left : left + cw]


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an H x W x C image."""
    return np.moveaxis(resize_array(np.moveaxis(image, -1, 0), out_h, out_w), 0, -1)


class LevelSetCache:
    """Memoises signed distances of cropped masks; flips are applied afterwards,
    which is exact because the distance transform commutes with reflections."""

    def __init__(self, max_items: int = 50000):
        self._store: dict = {}
        self.max_items = max_items

    def get(self, mask: np.ndarray) -> np.ndarray:
        key = (mask.shape, mask.tobytes())
        hit = self._store.get(key)
        if hit is None:
            hit = signed_distance(mask)
            if len(self._store) < self.max_items:
                self._store[key] = hit
        return hit


def apply_augmentation(sample: Sample, flip_h: bool, flip_v: bool, scale: float,
                       cache: LevelSetCache | None = None) -> Sample:
    h, w = sample.image.shape[:2]
    image = sample.image
    mask = sample.mask
    if scale != 1.0:
        image = resize_image(central_crop(image, scale), h, w)
        if mask is not None:
            mask = nearest_resize(central_crop(mask, scale), h, w)
    level_set = None
    if mask is not None:
        level_set = cache.get(mask) if cache is not None else signed_distance(mask)
    for flag, axis in ((flip_h, 1), (flip_v, 0)):
        if flag:
            image = np.flip(image, axis)
            if mask is not None:
                mask = np.flip(mask, axis)
                level_set = np.flip(level_set, axis)
    return replace(sample, image=np.ascontiguousarray(image),
                   mask=None if mask is None else np.ascontiguousarray(mask),
                   level_set=None if level_set is None else np.ascontiguousarray(level_set))


def augment_train(sample: Sample, rng: np.random.Generator, cache: LevelSetCache | None = None) -> Sample:
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    scale = CROP_SCALES[int(rng.integers(len(CROP_SCALES)))]
    return apply_augmentation(sample, flip_h, flip_v, scale, cache)
