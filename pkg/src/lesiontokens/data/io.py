"""On-disk dataset layout: ``images/<id>.png``, optional ``masks/<id>.png``, ``labels.csv``."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


class DataFormatError(ValueError):
    """The dataset directory does not follow the expected layout."""


@dataclass
class Sample:
    image: np.ndarray                  # H x W x 3, float in [0, 1]
    label: int
    id: str
    mask: np.ndarray | None = None     # H x W, uint8 in {0, 1}
    level_set: np.ndarray | None = None

    @property
    def has_mask(self) -> bool:
        return self.mask is not None


@dataclass
class ManifestEntry:
    id: str
    image: Path
    label: int
    mask: Path | None = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    split: str = "train"

    @property
    def segmentation_labeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.mask is not None]

    @property
    def classification_only(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.mask is None]

    def __len__(self) -> int:
        return len(self.entries)


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_image(path: Path, image: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, format="PNG")


def load_dataset(root, split: str = "train") -> DatasetManifest:
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        if not root.is_dir() or not any(root.iterdir()):
            raise DataFormatError(f"{root}: empty or missing dataset directory")
        raise DataFormatError(f"{root}: labels.csv not found")
    entries = []
    seen = set()
    with labels_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "label"} <= set(reader.fieldnames):
            raise DataFormatError(f"{labels_path}: header must contain id,label")
        for row in reader:
            sample_id = row["id"].strip()
            if sample_id in seen:
                raise DataFormatError(f"duplicate id {sample_id!r}")
            seen.add(sample_id)
            image = root / "images" / f"{sample_id}.png"
            if not image.is_file():
                raise DataFormatError(f"missing image for id {sample_id!r}: {image}")
            mask = root / "masks" / f"{sample_id}.png"
            try:
                label = int(row["label"])
            except ValueError as exc:
                raise DataFormatError(f"non-integer label for {sample_id!r}") from exc
            if mask.is_file():
                with Image.open(image) as a, Image.open(mask) as b:
                    if a.size != b.size:
                        raise DataFormatError(f"{sample_id}: mask size {b.size} != image size {a.size}")
            else:
                mask = None
            entries.append(ManifestEntry(sample_id, image, label, mask))
    if not entries:
        raise DataFormatError(f"{root}: manifest is empty")
    return DatasetManifest(root, entries, split)


def load_samples(manifest: DatasetManifest) -> list[Sample]:
    samples = []
    for entry in manifest.entries:
        image = read_image(entry.image)
        mask = None
        if entry.mask is not None:
            mask = read_mask(entry.mask)
            if mask.shape != image.shape[:2]:
                raise DataFormatError(f"{entry.id}: mask {mask.shape} does not match image {image.shape[:2]}")
        samples.append(Sample(image, entry.label, entry.id, mask))
    return samples
