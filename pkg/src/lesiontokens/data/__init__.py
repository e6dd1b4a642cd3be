"""Datasets, synthetic generation, augmentation, batching and TTA variants."""

from .augment import LevelSetCache, apply_augmentation, augment_train
from .io import DataFormatError, DatasetManifest, ManifestEntry, Sample, load_dataset, load_samples
from .sampler import Batch, batches_per_epoch, two_stream_batches
from .synth import SynthConfig, mask_elongation, synth_generate, synth_samples
from .tta import TTAVariant, tta_sizes, tta_variants

__all__ = [
    "Batch", "DataFormatError", "DatasetManifest", "LevelSetCache", "ManifestEntry", "Sample",
    "SynthConfig", "TTAVariant", "apply_augmentation", "augment_train", "batches_per_epoch",
    "load_dataset", "load_samples", "mask_elongation", "synth_generate", "synth_samples",
    "tta_sizes", "tta_variants", "two_stream_batches",
]
