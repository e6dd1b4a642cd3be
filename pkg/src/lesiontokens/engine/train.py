"""Two-stream training, evaluation and TTA-ensembled prediction."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .. import diffcore as dc
from ..data import (
    LevelSetCache,
    Sample,
    augment_train,
    batches_per_epoch,
    tta_variants,
    two_stream_batches,
)
from ..data.tta import TTAVariant
from ..losses import (
    CSV_FIELDS,
    LossReport,
    LossWeights,
    NonFiniteLoss,
    labeled_loss,
    report_row,
    unlabeled_loss,
)
from ..model import ModelConfig, ModelOutput, MultiTaskTokenNet
from .metrics import summarize
from .optim import Adam, linear_lr

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite value at step {step} in term {term!r}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    lr: float = 1e-5
    total_iters: int = 40000
    batch_size: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    rampup_unit: str = "epoch"
    augment: bool = True
    eval_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint: str = "model.mttu"
    inject_nan: str = ""  # "<step>:<term>", test hook for the divergence path

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.total_iters <= 0:
            raise ValueError("total_iters must be positive")
        if self.rampup_unit not in ("epoch", "iter"):
            raise ValueError("rampup_unit must be 'epoch' or 'iter'")

    def to_dict(self) -> dict:
        return asdict(self)


def desk_config(**overrides) -> TrainConfig:
    """Laptop-scale defaults: from-scratch training needs a far larger step size
    than fine-tuning pretrained weights, and the run is 20x shorter."""
    base = dict(lr=1e-3, total_iters=2000, weights=LossWeights(rampup_length=3.0))
    base.update(overrides)
    return TrainConfig(**base)


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([np.moveaxis(s.image, -1, 0) for s in samples])


def slice_output(out: ModelOutput, sl: slice) -> ModelOutput:
    return ModelOutput(out.mask_logits[sl], out.level_set[sl], out.class_logits[sl],
                       out.cls_attention[sl], [a[sl] for a in out.attentions])


@dataclass
class StepResult:
    lr: float
    labeled: LossReport | None
    unlabeled: LossReport | None
    total: float


def train_step(model: MultiTaskTokenNet, labeled: Sequence[Sample], unlabeled: Sequence[Sample],
               optimizer: Adam, weights: LossWeights, t: float, lr: float) -> StepResult:
    """One update on a batch split into a segmentation-labeled and a classification-only part.

    The objective is the labeled-stream mean loss plus the unlabeled-stream
    mean loss. Raises :class:`NonFiniteLoss` (naming the term) on divergence.
    """
    samples = list(labeled) + list(unlabeled)
    n_lab = len(labeled)
    optimizer.zero_grad()
    try:
        out = model(stack_images(samples))
    except dc.NonFiniteError as exc:
        raise NonFiniteLoss("forward", str(exc)) from exc
    total = None
    lab_report = unlab_report = None
    if n_lab:
        lab_out = slice_output(out, slice(0, n_lab))
        masks = np.stack([s.mask for s in labeled])
        lsfs = np.stack([s.level_set for s in labeled])
        labels = np.array([s.label for s in labeled])
        total, lab_report = labeled_loss(lab_out, masks, lsfs, labels, weights, t)
    if len(unlabeled):
        unlab_out = slice_output(out, slice(n_lab, None))
        labels = np.array([s.label for s in unlabeled])
        unlab_total, unlab_report = unlabeled_loss(unlab_out, labels, weights, t)
        total = unlab_total if total is None else total + unlab_total
    try:
        dc.backward(total)
    except dc.NonFiniteError as exc:
        raise NonFiniteLoss("backward", str(exc)) from exc
    optimizer.step(lr)
    return StepResult(lr, lab_report, unlab_report, float(total.data))


def _with_level_set(sample: Sample, cache: LevelSetCache) -> Sample:
    if sample.mask is None or sample.level_set is not None:
        return sample
    return replace(sample, level_set=cache.get(sample.mask))


def train(config: TrainConfig, samples: Sequence[Sample], log_path: Path | None = None,
          model: MultiTaskTokenNet | None = None,
          on_eval: Callable[[int, MultiTaskTokenNet], None] | None = None):
    """Run the full schedule; returns (model, optimizer, list of CSV rows)."""
    labeled = [s for s in samples if s.mask is not None]
    unlabeled = [s for s in samples if s.mask is None]
    model = model or MultiTaskTokenNet(config.model, seed=config.seed)
    optimizer = Adam(model.named_parameters(), config.beta1, config.beta2, config.eps)
    per_epoch = batches_per_epoch(len(labeled), len(unlabeled), config.batch_size)
    stream = two_stream_batches(labeled, unlabeled, config.batch_size, seed=config.seed)
    aug_rng = np.random.default_rng([config.seed, 7])
    cache = LevelSetCache()
    nan_step, nan_term = _parse_injection(config.inject_nan)
    rows = []
    fh = writer = None
    if log_path is not None:
        fh = Path(log_path).open("w", newline="")
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
    try:
        for step in range(config.total_iters):
            batch = next(stream)
            if config.augment:
                lab = [augment_train(s, aug_rng, cache) for s in batch.labeled]
                unlab = [augment_train(s, aug_rng, cache) for s in batch.unlabeled]
            else:
                lab = [_with_level_set(s, cache) for s in batch.labeled]
                unlab = list(batch.unlabeled)
            t = step / per_epoch if config.rampup_unit == "epoch" else float(step)
            lr = linear_lr(config.lr, step, config.total_iters)
            if step == nan_step:
                raise TrainingDiverged(step, nan_term)
            try:
                result = train_step(model, lab, unlab, optimizer, config.weights, t, lr)
            except NonFiniteLoss as exc:
                raise TrainingDiverged(step, exc.term) from exc
            row = report_row(step, lr, result.labeled, result.unlabeled)
            rows.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            if config.eval_every and on_eval and (step + 1) % config.eval_every == 0:
                on_eval(step + 1, model)
    finally:
        if fh is not None:
            fh.close()
    return model, optimizer, rows


def _parse_injection(spec: str) -> tuple[int, str]:
    if not spec:
        return -1, ""
    step, term = spec.split(":", 1)
    return int(step), term


# ----------------------------------------------------------------- inference
def predict(model: MultiTaskTokenNet, images: np.ndarray, batch_size: int = 16):
    """Plain forward on H x W x 3 images; returns (foreground prob maps, class probs, cls attention)."""
    fg, probs, attn = [], [], []
    with dc.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = np.stack([np.moveaxis(im, -1, 0) for im in images[i : i + batch_size]])
            out = model(chunk)
            fg.append(dc.softmax(out.mask_logits, axis=1).data[:, 1])
            probs.append(dc.softmax(out.class_logits, axis=-1).data)
            attn.append(out.cls_attention.data)
    return np.concatenate(fg), np.concatenate(probs), np.concatenate(attn)


def tta_predict(model: MultiTaskTokenNet, image: np.ndarray,
                variants: Sequence[TTAVariant] | None = None):
    """Average foreground probability (mapped back to the input frame) and class
    probabilities over the TTA variants."""
    h, w = image.shape[:2]
    variants = list(variants) if variants is not None else tta_variants(h)
    by_size: dict[int, list[TTAVariant]] = {}
    for v in variants:
        by_size.setdefault(v.size, []).append(v)
    fg_sum = np.zeros((h, w))
    prob_sum = None
    for size, group in by_size.items():
        views = np.stack([v.apply_image(image) for v in group])
        fg, probs, _ = predict(model, views, batch_size=len(group))
        for v, fmap in zip(group, fg):
            fg_sum += v.invert_map(fmap, h, w)
        prob_sum = probs.sum(axis=0) if prob_sum is None else prob_sum + probs.sum(axis=0)
    n = len(variants)
    return np.clip(fg_sum / n, 0.0, 1.0), prob_sum / n


def evaluate(model: MultiTaskTokenNet, samples: Sequence[Sample], use_tta: bool = False,
             reference_class: int = 0) -> dict:
    images = [s.image for s in samples]
    if use_tta:
        pairs = [tta_predict(model, im) for im in images]
        fg = [p[0] for p in pairs]
        probs = np.stack([p[1] for p in pairs])
    else:
        fg, probs, _ = predict(model, images)
    seg = [(f >= 0.5, s.mask) for f, s in zip(fg, samples) if s.mask is not None]
    report = summarize([p for p, _ in seg], [g for _, g in seg], probs,
                       np.array([s.label for s in samples]), reference_class)
    report["tta"] = bool(use_tta)
    return report
