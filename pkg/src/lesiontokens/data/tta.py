"""Test-time augmentation variants: input size x flip x rotation, each invertible."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .augment import nearest_resize, resize_image
from ..diffcore import resize_array

FLIPS = ("none", "h", "v")
ROTATIONS = (0, 90, 180, 270)
REFERENCE_SIZES = (224, 256, 288)


def tta_sizes(input_size: int, multiple: int = 16) -> tuple[int, ...]:
    """Scale the 224/256/288 ladder to ``input_size``, snapped to the token stride."""
    sizes = []
    for ref in REFERENCE_SIZES:
        s = max(multiple, int(round(input_size * ref / REFERENCE_SIZES[0] / multiple)) * multiple)
        if sizes and s <= sizes[-1]:
            s = sizes[-1] + multiple
        sizes.append(s)
    return tuple(sizes)


@dataclass(frozen=True)
class TTAVariant:
    size: int
    flip: str = "none"
    rotation: int = 0

    @property
    def keeps_orientation(self) -> bool:
        """True when the variant only resizes."""
        return self.flip == "none" and self.rotation == 0

    def _forward(self, arr: np.ndarray) -> np.ndarray:
        if self.flip == "h":
            arr = np.flip(arr, 1)
        elif self.flip == "v":
            arr = np.flip(arr, 0)
        return np.ascontiguousarray(np.rot90(arr, self.rotation // 90, axes=(0, 1)))

    def _inverse(self, arr: np.ndarray) -> np.ndarray:
        arr = np.rot90(arr, -(self.rotation // 90), axes=(0, 1))
        if self.flip == "h":
            arr = np.flip(arr, 1)
        elif self.flip == "v":
            arr = np.flip(arr, 0)
        return np.ascontiguousarray(arr)

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        h, w = image.shape[:2]
        if (h, w) != (self.size, self.size):
            image = resize_image(image, self.size, self.size)
        return self._forward(image)

    def apply_mask(self, mask: np.ndarray) -> np.ndarray:
        if mask.shape[:2] != (self.size, self.size):
            mask = nearest_resize(mask, self.size, self.size)
        return self._forward(mask)

    def invert_map(self, pred: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        """Map a per-pixel prediction made on the variant back to the original frame."""
        pred = self._inverse(pred)
        if pred.shape[:2] != (out_h, out_w):
            pred = resize_array(pred, out_h, out_w)
        return pred

    def invert_mask(self, mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
        mask = self._inverse(mask)
        if mask.shape[:2] != (out_h, out_w):
            mask = nearest_resize(mask, out_h, out_w)
        return mask


def tta_variants(input_size: int) -> list[TTAVariant]:
    """Full cross product: 3 sizes x 3 flip states x 4 rotations = 36 variants."""
    return [TTAVariant(size, flip, rot)
            for size, flip, rot in itertools.product(tta_sizes(input_size), FLIPS, ROTATIONS)]
