"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


class UnreliableGradcheck(RuntimeError):
    """The checked function is not deterministic, so no comparison is meaningful."""


@dataclass
class GradcheckReport:
    max_rel_err: float
    tol: float
    per_input: list[float] = field(default_factory=list)
    analytic: list[np.ndarray] = field(default_factory=list)
    numeric: list[np.ndarray] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||); zero when both gradients vanish below ``atol``."""
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    if scale < atol:
        return 0.0 if diff < atol else float("inf")
    return diff / scale


def gradcheck(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckReport:
    """Compare analytic gradients of scalar ``f(*x)`` with central differences.

    Every input with ``requires_grad`` is perturbed in place, one entry at a
    time. With ``max_entries`` only that many randomly chosen entries per input
    are probed (both sides of the comparison use the same entries).
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    targets = [t for t in inputs if t.requires_grad]
    if not targets:
        raise ValueError("gradcheck: no input requires grad")

    def evaluate() -> float:
        out = f(*inputs)
        if out.size != 1:
            raise ValueError(f"gradcheck: f must be scalar-valued, got shape {out.shape}")
        return float(out.data.reshape(-1)[0])

    first = evaluate()
    if evaluate() != first:
        raise UnreliableGradcheck("f returned different values for identical inputs")

    for t in targets:
        t.grad = None
    backward(f(*inputs))

    rng = rng or np.random.default_rng(0)
    report = GradcheckReport(max_rel_err=0.0, tol=tol)
    for t in targets:
        analytic_full = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = evaluate()
            flat[i] = orig - eps
            down = evaluate()
            flat[i] = orig
            numeric[n] = (up - down) / (2.0 * eps)
        analytic = analytic_full.reshape(-1)[idx]
        err = relative_error(analytic, numeric)
        report.per_input.append(err)
        report.analytic.append(analytic)
        report.numeric.append(numeric)
        report.max_rel_err = max(report.max_rel_err, err)
    return report
