"""Two-stream batching: half segmentation-labeled, half classification-only."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass
class Batch:
    labeled: list
    unlabeled: list


class _Cycle:
    """Endless shuffled pass over a stream, reshuffled each time it is exhausted."""

    def __init__(self, items: Sequence, rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self.order: list[int] = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self.order.pop(0)])
        return out


def batches_per_epoch(n_labeled: int, n_unlabeled: int, batch_size: int = 8) -> int:
    if n_unlabeled == 0:
        return math.ceil(n_labeled / batch_size)
    half = batch_size // 2
    return math.ceil(max(n_labeled, n_unlabeled) / half)


def two_stream_batches(labeled: Sequence, unlabeled: Sequence, batch_size: int = 8,
                       seed: int = 0) -> Iterator[Batch]:
    """Endless iterator of batches; each half is drawn from its own shuffled cycle."""
    if batch_size % 2:
        raise ValueError("batch_size must be even")
    if not labeled and not unlabeled:
        raise ValueError("both streams are empty")
    half = batch_size // 2
    lab = _Cycle(labeled, np.random.default_rng([seed, 0])) if labeled else None
    unlab = _Cycle(unlabeled, np.random.default_rng([seed, 1])) if unlabeled else None
    if lab is None or unlab is None:
        warnings.warn("one stream is empty; falling back to single-stream batches", stacklevel=2)
    while True:
        if lab is not None and unlab is not None:
            yield Batch(lab.take(half), unlab.take(half))
        elif lab is not None:
            yield Batch(lab.take(batch_size), [])
        else:
            yield Batch([], unlab.take(batch_size))
