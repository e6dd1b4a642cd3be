"""Registered finite-difference checks: every differentiable primitive and every loss term.

Each case draws a random instance, reduces the output to a scalar with a random
projection and compares reverse-mode gradients with central differences.
Inputs are drawn away from kinks and singularities (relu at 0, log/div near 0)
so that the finite-difference oracle itself is trustworthy.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, gradcheck
from .diffcore.tensor import _record
from .levelset import lsf_to_mask, signed_distance
from .losses import (
    LossWeights,
    arc_loss,
    cls_loss,
    dtc_loss,
    labeled_loss,
    lsf_loss,
    mask_loss,
    unlabeled_loss,
)
from .model import ModelOutput

DEFAULT_TOL = 1e-4

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor], dict]]


@dataclass
class CaseResult:
    name: str
    kind: str
    instances: int
    max_rel_err: float
    passed: bool
    seconds: float


def _leaf(rng, *shape, low=None, high=None, away_from_zero=0.0):
    if low is not None:
        data = rng.uniform(low, high, shape)
    else:
        data = rng.standard_normal(shape)
    if away_from_zero:
        data = np.where(np.abs(data) < away_from_zero, np.sign(data + 1e-300) * away_from_zero, data)
    return Tensor(data, requires_grad=True)


def _shape(rng, ndim=2, lo=2, hi=5):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, ndim))


def _elementwise(op, **draw):
    def builder(rng):
        x = _leaf(rng, *_shape(rng, 3), **draw)
        probe = Tensor(rng.standard_normal(x.shape))
        return (lambda x: dc.tsum(op(x) * probe)), [x], {}

    return builder


def _binary(op, b_draw=None):
    def builder(rng):
        shape = _shape(rng, 3)
        # broadcast the second operand over a random subset of axes
        b_shape = tuple(1 if rng.random() < 0.4 else s for s in shape)
        a = _leaf(rng, *shape)
        b = _leaf(rng, *b_shape, **(b_draw or {}))
        probe = Tensor(rng.standard_normal(shape))
        return (lambda a, b: dc.tsum(op(a, b) * probe)), [a, b], {}

    return builder


def _case_pow(rng):
    x = _leaf(rng, *_shape(rng, 2), low=0.3, high=2.0)
    exponent = float(rng.uniform(-2, 3))
    probe = Tensor(rng.standard_normal(x.shape))
    return (lambda x: dc.tsum(dc.power(x, exponent) * probe)), [x], {}


def _case_reduce(op):
    def builder(rng):
        x = _leaf(rng, *_shape(rng, 3))
        axis = [None, 0, 1, 2, (0, 2)][int(rng.integers(5))]
        keep = bool(rng.random() < 0.5)
        out = op(x, axis=axis, keepdims=keep)
        probe = Tensor(rng.standard_normal(out.shape))
        return (lambda x: dc.tsum(op(x, axis=axis, keepdims=keep) * probe)), [x], {}

    return builder


def _case_reshape(rng):
    x = _leaf(rng, 2, 3, 4)
    shape = [(4, 6), (24,), (3, 8), (2, 12)][int(rng.integers(4))]
    probe = Tensor(rng.standard_normal(shape))
    return (lambda x: dc.tsum(dc.reshape(x, shape) * probe)), [x], {}


def _case_transpose(rng):
    x = _leaf(rng, *_shape(rng, 3))
    axes = tuple(int(a) for a in rng.permutation(3))
    probe = Tensor(rng.standard_normal(tuple(x.shape[a] for a in axes)))
    return (lambda x: dc.tsum(dc.transpose(x, axes) * probe)), [x], {}


def _case_getitem(rng):
    x = _leaf(rng, 5, 4)
    index = [np.s_[1:4, ::2], np.s_[:, 2], (rng.integers(0, 5, 7),), np.s_[::-1]][int(rng.integers(4))]
    out = dc.getitem(x, index)
    probe = Tensor(rng.standard_normal(out.shape))
    return (lambda x: dc.tsum(dc.getitem(x, index) * probe)), [x], {}


def _case_concat(rng):
    axis = int(rng.integers(0, 2))
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, *((2, 4) if axis == 0 else (3, 5)))
    out = dc.concat([a, b], axis=axis)
    probe = Tensor(rng.standard_normal(out.shape))
    return (lambda a, b: dc.tsum(dc.concat([a, b], axis=axis) * probe)), [a, b], {}


def _case_matmul(rng):
    batch = () if rng.random() < 0.5 else (2,)
    n, k, m = _shape(rng, 3)
    a, b = _leaf(rng, *batch, n, k), _leaf(rng, k, m)
    probe = Tensor(rng.standard_normal(batch + (n, m)))
    return (lambda a, b: dc.tsum(dc.matmul(a, b) * probe)), [a, b], {}


def _case_softmax(op):
    def builder(rng):
        x = _leaf(rng, *_shape(rng, 3))
        axis = int(rng.integers(-3, 3))
        probe = Tensor(rng.standard_normal(x.shape))
        return (lambda x: dc.tsum(op(x * 2.0, axis=axis) * probe)), [x], {}

    return builder


def _case_layer_norm(rng):
    d = int(rng.integers(3, 8))
    x = _leaf(rng, 3, d)
    g, b = _leaf(rng, d), _leaf(rng, d)
    probe = Tensor(rng.standard_normal(x.shape))
    return (lambda x, g, b: dc.tsum(dc.layer_norm(x, g, b) * probe)), [x, g, b], {}


def _case_conv2d(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x, w, b = _leaf(rng, 2, c_in, 6, 5), _leaf(rng, c_out, c_in, k, k), _leaf(rng, c_out)
    out = dc.conv2d(x, w, b, stride=stride, padding=pad)
    probe = Tensor(rng.standard_normal(out.shape))
    return (lambda x, w, b: dc.tsum(dc.conv2d(x, w, b, stride=stride, padding=pad) * probe)), [x, w, b], {}


def _case_resize(rng):
    x = _leaf(rng, 2, *_shape(rng, 2, 2, 6))
    oh, ow = _shape(rng, 2, 1, 9)
    probe = Tensor(rng.standard_normal((2, oh, ow)))
    return (lambda x: dc.tsum(dc.bilinear_resize(x, oh, ow) * probe)), [x], {}


# ----------------------------------------------------------------- loss terms
def _case_mask_loss(rng):
    h, w = _shape(rng, 2, 3, 6)
    logits = _leaf(rng, 2, 2, h, w)
    target = rng.integers(0, 2, (2, h, w))
    return (lambda m: mask_loss(m, target)), [logits], {}


def _case_lsf_loss(rng):
    h, w = _shape(rng, 2, 3, 6)
    level = _leaf(rng, 2, h, w, low=-1, high=1)
    target = rng.uniform(-1, 1, (2, h, w))
    return (lambda L: lsf_loss(L, target)), [level], {}


def _case_cls_loss(rng):
    k = int(rng.integers(2, 5))
    logits = _leaf(rng, 3, k)
    labels = rng.integers(0, k, 3)
    return (lambda z: cls_loss(z, labels)), [logits], {}


def _case_dtc_loss(rng):
    h, w = _shape(rng, 2, 3, 6)
    logits = _leaf(rng, 2, 2, h, w)
    if rng.random() < 0.5:
        # steep regime used in training: keep |kL| where the sigmoid is resolvable at eps
        level = _leaf(rng, 2, h, w, low=-4 / 1500, high=4 / 1500)
        return (lambda m, L: dtc_loss(m, L, 1500.0)), [logits, level], {"eps": 1e-8}
    level = _leaf(rng, 2, h, w, low=-1, high=1)
    k = float(rng.uniform(1, 10))
    return (lambda m, L: dtc_loss(m, L, k)), [logits, level], {}


def _case_arc_loss(rng):
    g = int(rng.integers(2, 5))
    raw = _leaf(rng, 2, g * g)
    logits = Tensor(rng.standard_normal((2, 2, 4 * g, 4 * g)) * 3)
    return (lambda r: arc_loss(dc.softmax(r, axis=-1), logits)), [raw], {}


def _case_lsf_to_mask(rng):
    level = _leaf(rng, *_shape(rng, 2), low=-4 / 1500, high=4 / 1500)
    probe = Tensor(rng.standard_normal(level.shape))
    return (lambda L: dc.tsum(lsf_to_mask(L, 1500.0) * probe)), [level], {"eps": 1e-8}


def _random_mask(rng, h, w):
    mask = np.zeros((h, w), dtype=np.uint8)
    r0, c0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
    mask[r0 : r0 + h // 2 + 1, c0 : c0 + w // 2 + 1] = 1
    return mask


def _head_outputs(rng, b, h, w, classes, g):
    return [_leaf(rng, b, 2, h, w), _leaf(rng, b, h, w, low=-0.9, high=0.9),
            _leaf(rng, b, classes), _leaf(rng, b, g * g)]


def _with_fixed_arc_target(objective, weights, heads):
    """Composite objective whose attention-consistency target is held fixed.

    Training detaches the mask inside that term, so finite differences must not
    see it move either; the rest of the objective is checked end to end.
    """
    frozen = Tensor(heads[0].data.copy())
    no_arc = replace(weights, arc=0.0)

    def f(m, L, z, r):
        out = ModelOutput(m, L, z, dc.softmax(r, axis=-1))
        total, _ = objective(out, no_arc)
        _, report = objective(out, weights)
        return total + arc_loss(out.cls_attention, frozen) * report.coefficients.get("arc", 0.0)

    return f


def _case_labeled_total(rng):
    g, classes = 2, int(rng.integers(2, 4))
    h = w = 8
    heads = _head_outputs(rng, 2, h, w, classes, g)
    masks = np.stack([_random_mask(rng, h, w) for _ in range(2)])
    levels = np.stack([signed_distance(m) for m in masks])
    labels = rng.integers(0, classes, 2)
    weights = LossWeights(k=float(rng.uniform(1, 10)), rampup_length=10.0)
    t = float(rng.uniform(0, 12))
    objective = lambda out, w: labeled_loss(out, masks, levels, labels, w, t)
    return _with_fixed_arc_target(objective, weights, heads), heads, {"max_entries": 32}


def _case_unlabeled_total(rng):
    g, classes = 2, int(rng.integers(2, 4))
    heads = _head_outputs(rng, 2, 8, 8, classes, g)
    labels = rng.integers(0, classes, 2)
    weights = LossWeights(k=float(rng.uniform(1, 10)), rampup_length=10.0)
    t = float(rng.uniform(0, 12))
    objective = lambda out, w: unlabeled_loss(out, labels, w, t)
    return _with_fixed_arc_target(objective, weights, heads), heads, {"max_entries": 32}


PRIMITIVE_CASES: dict[str, Builder] = {
    "add": _binary(dc.add),
    "sub": _binary(dc.sub),
    "mul": _binary(dc.mul),
    "div": _binary(dc.div, {"away_from_zero": 0.5}),
    "neg": _elementwise(dc.neg),
    "pow": _case_pow,
    "exp": _elementwise(dc.exp),
    "log": _elementwise(dc.log, low=0.2, high=3.0),
    "relu": _elementwise(dc.relu, away_from_zero=0.05),
    "tanh": _elementwise(dc.tanh),
    "sigmoid": _elementwise(dc.sigmoid),
    "sum": _case_reduce(dc.tsum),
    "mean": _case_reduce(dc.mean),
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "getitem": _case_getitem,
    "concat": _case_concat,
    "matmul": _case_matmul,
    "softmax": _case_softmax(dc.softmax),
    "log_softmax": _case_softmax(dc.log_softmax),
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "bilinear_resize": _case_resize,
}

LOSS_CASES: dict[str, Builder] = {
    "mask_loss": _case_mask_loss,
    "lsf_loss": _case_lsf_loss,
    "cls_loss": _case_cls_loss,
    "dtc_loss": _case_dtc_loss,
    "arc_loss": _case_arc_loss,
    "lsf_to_mask": _case_lsf_to_mask,
    "labeled_total": _case_labeled_total,
    "unlabeled_total": _case_unlabeled_total,
}


def all_cases() -> dict[str, tuple[str, Builder]]:
    cases = {name: ("primitive", b) for name, b in PRIMITIVE_CASES.items()}
    cases.update({name: ("loss", b) for name, b in LOSS_CASES.items()})
    return cases


def _broken(t: Tensor) -> Tensor:
    # identity forward with a wrong backward, used to prove the suite can fail
    return _record("broken", t.data.copy(), (t,), lambda g: (g * 1.5,))


def run_case(name: str, instances: int = 20, seed: int = 0, tol: float = DEFAULT_TOL,
             inject_bug: bool = False) -> CaseResult:
    kind, builder = all_cases()[name]
    index = list(all_cases()).index(name)
    start = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, index, i])
        f, inputs, opts = builder(rng)
        if inject_bug:
            f = (lambda g: (lambda *xs: _broken(g(*xs))))(f)
        report = gradcheck(f, inputs, tol=tol, rng=rng, **opts)
        worst = max(worst, report.max_rel_err)
    return CaseResult(name, kind, instances, worst, worst < tol, time.perf_counter() - start)


def run_suite(instances: int = 20, seed: int = 0, tol: float = DEFAULT_TOL,
              inject_bug: str | None = None, names=None) -> list[CaseResult]:
    cases = all_cases()
    if inject_bug is not None and inject_bug not in cases:
        raise KeyError(f"unknown check {inject_bug!r}")
    selected = list(names) if names else list(cases)
    return [run_case(n, instances, seed, tol, inject_bug=(n == inject_bug)) for n in selected]


def results_as_dicts(results: list[CaseResult]) -> list[dict]:
    return [asdict(r) for r in results]
