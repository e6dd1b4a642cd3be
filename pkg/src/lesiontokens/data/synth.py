"""Synthetic dermoscopy-like images: textured skin, one pigmented blob, optional hair.

Class 0 lesions are near-circular with a smooth border and even colour;
class 1 lesions are elongated, with an irregular border and two-tone
pigment. Everything is drawn from a per-sample generator seeded by
``(seed, index)``, so output bytes depend only on the config.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import resize_array
from .io import Sample, write_image, write_mask

DEFAULT_CLASS_RULES = {
    "0": {"aspect": [1.0, 1.15], "irregularity": 0.03, "variegation": 0.0},
    "1": {"aspect": [1.9, 2.8], "irregularity": 0.12, "variegation": 0.35},
}


@dataclass
class SynthConfig:
    count: int = 200
    size: int = 64
    seed: int = 0
    unlabeled_fraction: float = 0.0
    hair_probability: float = 0.3
    area_range: list[float] = field(default_factory=lambda: [0.06, 0.35])
    class_rules: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_CLASS_RULES)))

    def __post_init__(self):
        if self.size % 16:
            raise ValueError("size must be divisible by 16")
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not 0.0 <= self.unlabeled_fraction <= 1.0:
            raise ValueError("unlabeled_fraction must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.class_rules)


AREA_BOUNDS = (0.02, 0.60)


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    return resize_array(rng.standard_normal((cells, cells)), size, size)


def lesion_mask(rng: np.random.Generator, size: int, rule: dict, area_range) -> np.ndarray:
    """Star-shaped blob: an ellipse in polar form with a harmonic border wobble."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(100):
        aspect = rng.uniform(*rule["aspect"])
        area = rng.uniform(*area_range) * size * size
        minor = np.sqrt(area / (np.pi * aspect))
        major = aspect * minor
        angle = rng.uniform(0, np.pi)
        margin = 0.15 * size
        cy, cx = size / 2 + rng.uniform(-margin, margin, size=2)
        dy, dx = yy - cy, xx - cx
        theta = np.arctan2(dy, dx)
        rel = theta - angle
        radius = 1.0 / np.sqrt((np.cos(rel) / major) ** 2 + (np.sin(rel) / minor) ** 2)
        wobble = np.ones_like(theta)
        for harmonic in range(3, 7):
            amp = rule["irregularity"] * rng.uniform(0.3, 1.0)
            wobble += amp * np.sin(harmonic * theta + rng.uniform(0, 2 * np.pi))
        mask = (np.hypot(dy, dx) < radius * wobble).astype(np.uint8)
        frac = mask.mean()
        if AREA_BOUNDS[0] <= frac <= AREA_BOUNDS[1]:
            return mask
    raise RuntimeError("could not draw a lesion within the area bounds")


def _draw_hair(rng: np.random.Generator, image: np.ndarray) -> None:
    size = image.shape[0]
    for _ in range(rng.integers(1, 4)):
        p0, p1, p2 = rng.uniform(0, size, size=(3, 2))
        t = np.linspace(0, 1, 4 * size)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t * t * p2
        shade = rng.uniform(0.05, 0.2)
        for y, x in np.floor(pts).astype(int):
            if 0 <= y < size and 0 <= x < size:
                image[y, x] = shade


def render_sample(config: SynthConfig, index: int) -> tuple[np.ndarray, np.ndarray, int]:
    rng = np.random.default_rng([config.seed, index])
    size = config.size
    label = int(rng.integers(config.num_classes))
    rule = config.class_rules[str(label)]

    skin = np.array([0.86, 0.68, 0.58]) + rng.uniform(-0.06, 0.06, 3)
    texture = 0.04 * _smooth_noise(rng, size, 8) + 0.015 * _smooth_noise(rng, size, 24)
    image = skin[None, None, :] + texture[..., None]

    mask = lesion_mask(rng, size, rule, config.area_range)
    pigment = np.array([0.42, 0.26, 0.18]) + rng.uniform(-0.05, 0.05, 3)
    shading = 0.05 * _smooth_noise(rng, size, 6)
    lesion = pigment[None, None, :] + shading[..., None]
    if rule.get("variegation", 0.0) > 0:
        blotch = _smooth_noise(rng, size, 5) > 0.2
        lesion = lesion - rule["variegation"] * 0.5 * blotch[..., None] * pigment[None, None, :]
    # soften the border by one pixel so the boundary is not a hard step
    soft = resize_array(resize_array(mask.astype(float), size // 2, size // 2), size, size)
    alpha = np.clip(0.5 * mask + 0.5 * soft, 0, 1)[..., None]
    image = (1 - alpha) * image + alpha * lesion

    if rng.random() < config.hair_probability:
        _draw_hair(rng, image)
    image = image + 0.015 * rng.standard_normal(image.shape)
    return np.clip(image, 0.0, 1.0), mask, label


def unlabeled_indices(config: SynthConfig) -> set[int]:
    n_unlabeled = int(round(config.count * config.unlabeled_fraction))
    order = np.random.default_rng([config.seed, 2**31 - 1]).permutation(config.count)
    return set(int(i) for i in order[:n_unlabeled])


def synth_samples(config: SynthConfig) -> list[Sample]:
    """Generate in memory (same content as :func:`synth_generate` before PNG quantisation)."""
    skip = unlabeled_indices(config)
    out = []
    for i in range(config.count):
        image, mask, label = render_sample(config, i)
        out.append(Sample(image, label, f"{i:05d}", None if i in skip else mask))
    return out


def synth_generate(config: SynthConfig, root) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    skip = unlabeled_indices(config)
    rows = []
    for i in range(config.count):
        image, mask, label = render_sample(config, i)
        sample_id = f"{i:05d}"
        write_image(root / "images" / f"{sample_id}.png", image)
        if i not in skip:
            write_mask(root / "masks" / f"{sample_id}.png", mask)
        rows.append((sample_id, label))
    with (root / "labels.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        writer.writerows(rows)
    meta = {"generator": "synthetic-lesions", "seed": config.seed, "config": asdict(config)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def mask_elongation(mask: np.ndarray) -> float:
    """Ratio of principal axis lengths from second moments (1 for a disc)."""
    ys, xs = np.nonzero(mask)
    cov = np.cov(np.stack([ys, xs]).astype(float))
    lo, hi = np.linalg.eigvalsh(cov)
    return float(np.sqrt(hi / max(lo, 1e-12)))
