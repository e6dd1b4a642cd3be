import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesiontokens import diffcore as dc
from lesiontokens.diffcore import Tensor, gradcheck
from lesiontokens.levelset import signed_distance
from lesiontokens.losses import (
    ABLATION_PRESETS,
    LossWeights,
    ablation_weights,
    arc_loss,
    cls_loss,
    dtc_loss,
    labeled_loss,
    lsf_loss,
    mask_loss,
    rampup_weight,
    unlabeled_loss,
)
from lesiontokens.model import ModelOutput


def sharp_logits(mask, margin=20.0):
    fg = np.asarray(mask, dtype=float)
    return np.stack([-margin * fg + margin * (1 - fg), margin * fg - margin * (1 - fg)], axis=-3) / 2


def blob_mask(size=16, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(size * 0.3, size * 0.7, 2)
    r = rng.uniform(size * 0.15, size * 0.3)
    return ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r).astype(np.uint8)


# --------------------------------------------------------------- mask / lsf / cls
def test_mask_loss_examples():
    mask = blob_mask()
    assert mask_loss(Tensor(sharp_logits(mask, 40.0)), mask).item() < 1e-8
    assert mask_loss(Tensor(np.zeros((2, 16, 16))), mask).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        mask_loss(Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 2))


def test_mask_loss_gradient():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    target = rng.integers(0, 2, (2, 5, 5))
    assert gradcheck(lambda x: mask_loss(x, target), logits).max_rel_err < 1e-6


def test_lsf_loss_examples_and_gradient():
    target = np.random.default_rng(1).uniform(-1, 1, (6, 6))
    assert lsf_loss(Tensor(target), target).item() == 0.0
    assert lsf_loss(Tensor(target + 0.1), target).item() == pytest.approx(0.01)
    level = Tensor(np.random.default_rng(2).uniform(-1, 1, (6, 6)), requires_grad=True)
    assert gradcheck(lambda L: lsf_loss(L, target), level).max_rel_err < 1e-6


def test_cls_loss_examples():
    logits = np.zeros((1, 3))
    logits[0, 2] = 20.0
    assert cls_loss(Tensor(logits), [2]).item() < 1e-8
    assert cls_loss(Tensor(np.zeros((1, 3))), [1]).item() == pytest.approx(math.log(3))
    with pytest.raises(ValueError):
        cls_loss(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        cls_loss(Tensor(np.zeros((1, 3))), [-1])


def test_cls_loss_gradient():
    logits = Tensor(np.random.default_rng(3).standard_normal((4, 3)), requires_grad=True)
    assert gradcheck(lambda x: cls_loss(x, [0, 2, 1, 1]), logits).max_rel_err < 1e-6


# --------------------------------------------------------------- dual-task consistency
def test_dtc_zero_on_consistent_pair():
    for seed in range(10):
        mask = blob_mask(seed=seed)
        level = signed_distance(mask)
        assert dtc_loss(Tensor(sharp_logits(mask, 80.0)), Tensor(level), 1500).item() < 1e-12


def test_dtc_examples():
    assert dtc_loss(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((4, 4))), 1500).item() == 0.0
    certain_fg = sharp_logits(np.ones((4, 4)), 80.0)
    assert dtc_loss(Tensor(certain_fg), Tensor(np.ones((4, 4))), 1500).item() == pytest.approx(1.0)


def test_dtc_gradient_both_heads():
    rng = np.random.default_rng(4)
    logits = Tensor(rng.standard_normal((2, 2, 4, 4)), requires_grad=True)
    level = Tensor(rng.uniform(-1, 1, (2, 4, 4)), requires_grad=True)
    assert gradcheck(lambda m, L: dtc_loss(m, L, 3.0), [logits, level]).max_rel_err < 1e-6


# --------------------------------------------------------------- attended region consistency
def test_arc_examples():
    attention = np.random.default_rng(5).dirichlet(np.ones(16))
    assert arc_loss(Tensor(attention), Tensor(sharp_logits(np.ones((64, 64)), 40.0))).item() < 1e-12

    half = np.zeros((64, 64))
    half[:, :32] = 1
    uniform = np.full(16, 1 / 16)
    assert arc_loss(Tensor(uniform), Tensor(sharp_logits(half, 80.0))).item() == pytest.approx(0.5, abs=1e-12)

    onehot = np.zeros(16)
    onehot[3] = 1.0  # row 0, col 3: background
    assert arc_loss(Tensor(onehot), Tensor(sharp_logits(half, 80.0))).item() == pytest.approx(1.0, abs=1e-12)


def test_arc_passes_no_gradient_to_mask():
    rng = np.random.default_rng(6)
    att = Tensor(rng.dirichlet(np.ones(4)), requires_grad=True)
    logits = Tensor(rng.standard_normal((2, 8, 8)), requires_grad=True)
    dc.backward(arc_loss(att, logits))
    assert logits.grad is None
    assert att.grad is not None


def test_arc_gradient_wrt_attention():
    rng = np.random.default_rng(7)
    raw = Tensor(rng.standard_normal((2, 9)), requires_grad=True)
    logits = Tensor(rng.standard_normal((2, 2, 12, 12)))
    assert gradcheck(lambda r: arc_loss(dc.softmax(r, axis=-1), logits), raw).max_rel_err < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_arc_bounded(seed):
    rng = np.random.default_rng(seed)
    att = rng.dirichlet(np.ones(16) * rng.uniform(0.1, 2))
    logits = rng.standard_normal((2, 32, 32)) * rng.uniform(0, 10)
    value = arc_loss(Tensor(att), Tensor(logits)).item()
    assert -1e-12 <= value <= 1 + 1e-12


# --------------------------------------------------------------- ramp-up
def test_rampup_examples():
    assert rampup_weight(40, 40, 2.0) == 2.0
    assert rampup_weight(0, 40, 1.0) == pytest.approx(math.exp(-5.0))
    assert rampup_weight(0, 40, 1.0) == pytest.approx(0.006738, abs=1e-6)
    values = [rampup_weight(t, 40, 1.0) for t in np.linspace(0, 40, 81)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert rampup_weight(0, 40, 1) < rampup_weight(20, 40, 1) < rampup_weight(40, 40, 1) == 1.0
    assert rampup_weight(500, 40, 1.0) == 1.0


# --------------------------------------------------------------- composite objectives
def perfect_output(mask):
    g = 4
    coarse = mask.reshape(g, mask.shape[0] // g, g, mask.shape[1] // g).min(axis=(1, 3)).ravel()
    attention = coarse / coarse.sum()
    logits = np.array([[-20.0, 20.0]])
    return ModelOutput(Tensor(sharp_logits(mask, 80.0)[None]), Tensor(signed_distance(mask)[None]),
                       Tensor(logits), Tensor(attention[None]))


def test_labeled_loss_perfect_prediction():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[4:28, 6:26] = 1
    total, report = labeled_loss(perfect_output(mask), mask[None], signed_distance(mask)[None],
                                 np.array([1]), LossWeights(), t=100)
    for name, value in report.terms.items():
        assert value < 1e-6, name
    assert total.item() < 1e-6


def test_only_mask_term_when_other_weights_zero():
    rng = np.random.default_rng(8)
    mask = blob_mask(16)
    out = ModelOutput(Tensor(rng.standard_normal((1, 2, 16, 16))), Tensor(rng.uniform(-1, 1, (1, 16, 16))),
                      Tensor(rng.standard_normal((1, 2))), Tensor(rng.dirichlet(np.ones(16))[None]))
    w = LossWeights(cls=0, lsf=0, dtc=0, arc=0)
    total, report = labeled_loss(out, mask[None], signed_distance(mask)[None], np.array([0]), w, t=0)
    assert total.item() == report.terms["mask"]


def test_report_totals_are_weighted_sums():
    rng = np.random.default_rng(9)
    mask = blob_mask(16)
    out = ModelOutput(Tensor(rng.standard_normal((1, 2, 16, 16))), Tensor(rng.uniform(-1, 1, (1, 16, 16))),
                      Tensor(rng.standard_normal((1, 2))), Tensor(rng.dirichlet(np.ones(16))[None]))
    for setting in ABLATION_PRESETS:
        w = ablation_weights(setting)
        _, lab = labeled_loss(out, mask[None], signed_distance(mask)[None], np.array([1]), w, t=1.3)
        _, unlab = unlabeled_loss(out, np.array([1]), w, t=1.3)
        assert abs(lab.total - lab.weighted_sum()) < 1e-12
        assert abs(unlab.total - unlab.weighted_sum()) < 1e-12
        assert all(v >= 0 for v in lab.terms.values())


def test_toggling_a_weight_removes_exactly_that_term():
    rng = np.random.default_rng(10)
    mask = blob_mask(16)
    out = ModelOutput(Tensor(rng.standard_normal((1, 2, 16, 16))), Tensor(rng.uniform(-1, 1, (1, 16, 16))),
                      Tensor(rng.standard_normal((1, 2))), Tensor(rng.dirichlet(np.ones(16))[None]))
    full_total, full = labeled_loss(out, mask[None], signed_distance(mask)[None], np.array([1]),
                                    LossWeights(), t=50)
    for name in ("cls", "lsf", "dtc", "arc"):
        w = LossWeights(**{name: 0.0})
        total, _ = labeled_loss(out, mask[None], signed_distance(mask)[None], np.array([1]), w, t=50)
        expected = full_total.item() - full.coefficients[name] * full.terms[name]
        assert total.item() == pytest.approx(expected, abs=1e-12)


def test_unlabeled_loss_shape_and_ramp():
    rng = np.random.default_rng(11)
    out = ModelOutput(Tensor(rng.standard_normal((1, 2, 16, 16))), Tensor(rng.uniform(-1, 1, (1, 16, 16))),
                      Tensor(rng.standard_normal((1, 3))), Tensor(rng.dirichlet(np.ones(16))[None]))
    w = LossWeights(cls=0.0, arc=0.0, dtc=2.0, rampup_length=40)
    total, report = unlabeled_loss(out, np.array([2]), w, t=0)
    assert set(report.terms) == {"cls", "dtc", "arc"}
    assert total.item() == pytest.approx(0.0067379 * 2.0 * report.terms["dtc"], rel=1e-4)


def test_ablation_presets_toggle_terms():
    assert ablation_weights(1).cls == 0 and ablation_weights(1).mask == 1
    assert ablation_weights(2).mask == 0 and ablation_weights(2).cls > 0
    assert ablation_weights(6) == LossWeights()
    with pytest.raises(ValueError):
        ablation_weights(7)


def test_default_weights_match_reported_settings():
    w = LossWeights()
    assert (w.cls, w.lsf, w.arc, w.k, w.rampup_length) == (0.25, 5.0, 1.0, 1500.0, 40.0)
