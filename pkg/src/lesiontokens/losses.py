"""Supervision terms for the two training streams and the consistency ramp-up.

All functions accept batched tensors (leading batch axis) as well as single
images; every term is a mean over pixels and images so the weights keep the
same scale whatever the resolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .levelset import lsf_to_mask


@dataclass
class LossWeights:
    mask: float = 1.0
    cls: float = 0.25
    lsf: float = 5.0
    dtc: float = 1.0
    arc: float = 1.0
    k: float = 1500.0
    rampup_length: float = 40.0

    def __post_init__(self):
        for name in ("mask", "cls", "lsf", "dtc", "arc"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.rampup_length < 0:
            raise ValueError("rampup_length must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


# Table-style ablation settings: which terms are switched on.
ABLATION_PRESETS: dict[int, dict[str, float]] = {
    1: dict(mask=1.0, cls=0.0, lsf=0.0, dtc=0.0, arc=0.0),
    2: dict(mask=0.0, cls=0.25, lsf=0.0, dtc=0.0, arc=0.0),
    3: dict(mask=1.0, cls=0.25, lsf=0.0, dtc=0.0, arc=0.0),
    4: dict(mask=1.0, cls=0.25, lsf=5.0, dtc=0.0, arc=0.0),
    5: dict(mask=1.0, cls=0.25, lsf=5.0, dtc=1.0, arc=0.0),
    6: dict(mask=1.0, cls=0.25, lsf=5.0, dtc=1.0, arc=1.0),
}


def ablation_weights(setting: int, base: LossWeights | None = None) -> LossWeights:
    base = base or LossWeights()
    if setting not in ABLATION_PRESETS:
        raise ValueError(f"unknown ablation setting {setting}; choose from {sorted(ABLATION_PRESETS)}")
    values = base.to_dict()
    values.update(ABLATION_PRESETS[setting])
    return LossWeights(**values)


@dataclass
class LossReport:
    terms: dict[str, float] = field(default_factory=dict)
    coefficients: dict[str, float] = field(default_factory=dict)
    total: float = 0.0
    stream: str = "labeled"
    count: int = 1

    def weighted_sum(self) -> float:
        return sum(self.coefficients[name] * value for name, value in self.terms.items())


def _binary_target(target) -> np.ndarray:
    arr = np.asarray(target.data if isinstance(target, Tensor) else target)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask target must be binary")
    return arr.astype(np.float64)


def foreground_probability(mask_logits: Tensor) -> Tensor:
    return dc.softmax(mask_logits, axis=-3)[..., 1, :, :]


def mask_loss(mask_logits: Tensor, target) -> Tensor:
    """Mean per-pixel two-class cross-entropy; logits carry the class axis third from last."""
    fg = _binary_target(target)
    if mask_logits.shape[-3] != 2 or mask_logits.shape[:-3] + mask_logits.shape[-2:] != fg.shape:
        raise dc.DimensionError(f"mask_loss: logits {mask_logits.shape} vs target {fg.shape}")
    logp = dc.log_softmax(mask_logits, axis=-3)
    picked = logp[..., 0, :, :] * (1.0 - fg) + logp[..., 1, :, :] * fg
    return -dc.mean(picked)


def lsf_loss(level_set: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if level_set.shape != target.shape:
        raise dc.DimensionError(f"lsf_loss: {level_set.shape} vs {target.shape}")
    diff = level_set - target
    return dc.mean(diff * diff)


def cls_loss(class_logits: Tensor, label) -> Tensor:
    labels = np.atleast_1d(np.asarray(label))
    k = class_logits.shape[-1]
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class labels must be integers in [0, {k})")
    one_hot = np.eye(k)[labels].reshape(class_logits.shape)
    return -dc.mean(dc.tsum(dc.log_softmax(class_logits, axis=-1) * one_hot, axis=-1))


def dtc_loss(mask_logits: Tensor, level_set: Tensor, k: float) -> Tensor:
    """Squared disagreement between the mask head and the mask implied by the level-set head."""
    if mask_logits.shape[:-3] + mask_logits.shape[-2:] != level_set.shape:
        raise dc.DimensionError(f"dtc_loss: {mask_logits.shape} vs {level_set.shape}")
    diff = foreground_probability(mask_logits) - lsf_to_mask(level_set, k)
    return dc.mean(diff * diff)


def arc_loss(cls_attention: Tensor, mask_logits: Tensor) -> Tensor:
    """Class-token attention mass landing on predicted background.

    The mask prediction is a fixed target here: it is detached before being
    resized to the token grid, so only the attention receives gradient.
    """
    n = cls_attention.shape[-1]
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise dc.DimensionError(f"arc_loss: {n} attention entries do not form a square grid")
    fg = dc.softmax(dc.stop_gradient(mask_logits), axis=-3).data[..., 1, :, :]
    coarse = dc.resize_array(fg, g, g).reshape(fg.shape[:-2] + (n,))
    if coarse.shape != cls_attention.shape:
        raise dc.DimensionError(f"arc_loss: attention {cls_attention.shape} vs mask {mask_logits.shape}")
    return dc.mean(dc.tsum(cls_attention * (1.0 - coarse), axis=-1))


def rampup_weight(t: float, length: float, weight: float) -> float:
    """Gaussian ramp exp(-5 (1 - t/T)^2), reaching ``weight`` at t >= T."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if length == 0:
        return float(weight)
    phase = 1.0 - min(t, length) / length
    return float(weight) * math.exp(-5.0 * phase * phase)


def labeled_loss(output, mask_gt, lsf_gt, label, weights: LossWeights, t: float) -> tuple[Tensor, LossReport]:
    """Weighted loss for images with mask, level-set and class targets."""
    if mask_gt is None or lsf_gt is None or label is None:
        raise ValueError("labeled_loss needs mask, level-set and class targets")
    terms = {
        "mask": lambda: mask_loss(output.mask_logits, mask_gt),
        "cls": lambda: cls_loss(output.class_logits, label),
        "lsf": lambda: lsf_loss(output.level_set, lsf_gt),
        "dtc": lambda: dtc_loss(output.mask_logits, output.level_set, weights.k),
        "arc": lambda: arc_loss(output.cls_attention, output.mask_logits),
    }
    coeffs = {
        "mask": weights.mask,
        "cls": weights.cls,
        "lsf": weights.lsf,
        "dtc": rampup_weight(t, weights.rampup_length, weights.dtc),
        "arc": weights.arc,
    }
    return _combine(terms, coeffs, "labeled", len(np.atleast_1d(label)))


def unlabeled_loss(output, label, weights: LossWeights, t: float) -> tuple[Tensor, LossReport]:
    """Weighted loss for classification-only images; no mask or level-set term."""
    if label is None:
        raise ValueError("unlabeled_loss needs class targets")
    terms = {
        "cls": lambda: cls_loss(output.class_logits, label),
        "dtc": lambda: dtc_loss(output.mask_logits, output.level_set, weights.k),
        "arc": lambda: arc_loss(output.cls_attention, output.mask_logits),
    }
    coeffs = {
        "cls": weights.cls,
        "dtc": rampup_weight(t, weights.rampup_length, weights.dtc),
        "arc": weights.arc,
    }
    return _combine(terms, coeffs, "unlabeled", len(np.atleast_1d(label)))


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"loss term {term!r} is not finite" + (f" ({detail})" if detail else ""))
        self.term = term


def _combine(thunks, coeffs: dict[str, float], stream: str, count: int):
    terms: dict[str, Tensor] = {}
    for name, thunk in thunks.items():
        try:
            term = thunk()
        except dc.NonFiniteError as exc:
            raise NonFiniteLoss(name, str(exc)) from exc
        if not np.isfinite(term.data).all():
            raise NonFiniteLoss(name)
        terms[name] = term
    total = None
    for name, term in terms.items():
        if coeffs[name] == 0.0:
            continue  # dropped terms contribute neither value nor gradient
        piece = term * coeffs[name]
        total = piece if total is None else total + piece
    if total is None:
        total = Tensor(0.0)
    values = {name: float(term.data) for name, term in terms.items()}
    return total, LossReport(values, coeffs, float(total.data), stream, count)


CSV_FIELDS = ("step", "lr", "mask", "cls", "lsf", "dtc", "arc", "total_lab", "total_unlab")


def report_row(step: int, lr: float, lab: LossReport | None, unlab: LossReport | None) -> dict:
    """Flatten one training step into a CSV row.

    ``mask`` and ``lsf`` come from the labeled stream; ``cls``, ``dtc`` and
    ``arc`` average the two streams (weighted by how many images each had).
    """
    row = {"step": step, "lr": lr}
    lab_terms = lab.terms if lab else {}
    unlab_terms = unlab.terms if unlab else {}
    row["mask"] = lab_terms.get("mask", float("nan"))
    row["lsf"] = lab_terms.get("lsf", float("nan"))
    n_lab = lab.count if lab else 0
    n_unlab = unlab.count if unlab else 0
    for name in ("cls", "dtc", "arc"):
        parts = [(lab_terms[name], n_lab)] if lab else []
        if unlab:
            parts.append((unlab_terms[name], n_unlab))
        total = sum(n for _, n in parts)
        row[name] = sum(v * n for v, n in parts) / total if total else float("nan")
    row["total_lab"] = lab.total if lab else 0.0
    row["total_unlab"] = unlab.total if unlab else 0.0
    return row
