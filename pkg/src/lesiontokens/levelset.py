"""Signed distance fields for binary lesion masks.

Convention: foreground pixels carry minus the distance to the nearest
background pixel, background pixels plus the distance to the nearest
foreground pixel. No pixel sits exactly on the boundary, so the field is
never zero.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Tensor, sigmoid

BRUTE_FORCE_MAX_SIDE = 64
_INF = np.inf


def _check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError(f"mask must be a non-empty 2-d grid, got shape {mask.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    return mask.astype(bool)


def default_radius(shape: tuple[int, int]) -> float:
    return min(shape) / 2.0


def _lower_envelope(f: np.ndarray) -> np.ndarray:
    """1-D squared distance transform: min_q (p - q)^2 + f[q] (Felzenszwalb-Huttenlocher)."""
    n = f.size
    out = np.empty(n)
    v = np.zeros(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = -1
    for q in range(n):
        if f[q] == _INF:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0], z[1] = -_INF, _INF
            continue
        while True:
            p = v[k]
            s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = -_INF if k == 0 else s
        z[k + 1] = _INF
    if k < 0:
        out.fill(_INF)
        return out
    j = 0
    for p in range(n):
        while z[j + 1] < p:
            j += 1
        d = p - v[j]
        out[p] = d * d + f[v[j]]
    return out


def squared_distance_to(sites: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest True pixel."""
    h, w = sites.shape
    cols = np.where(sites, 0.0, _INF)
    for c in range(w):
        cols[:, c] = _lower_envelope(cols[:, c])
    for r in range(h):
        cols[r, :] = _lower_envelope(cols[r, :])
    return cols


def raw_signed_distance(mask) -> np.ndarray:
    """Untruncated signed distance (fast path).

    Degenerate masks with a single class give ``-/+ default_radius``.
    """
    fg = _check_mask(mask)
    if fg.all():
        return np.full(fg.shape, -default_radius(fg.shape))
    if not fg.any():
        return np.full(fg.shape, default_radius(fg.shape))
    to_bg = np.sqrt(squared_distance_to(~fg))
    to_fg = np.sqrt(squared_distance_to(fg))
    return np.where(fg, -to_bg, to_fg)


def brute_force_signed_distance(mask) -> np.ndarray:
    """Pairwise-minimum oracle for :func:`raw_signed_distance` (O(n^2 m^2))."""
    fg = _check_mask(mask)
    h, w = fg.shape
    if h > BRUTE_FORCE_MAX_SIDE or w > BRUTE_FORCE_MAX_SIDE:
        raise ValueError(f"brute force refuses grids above {BRUTE_FORCE_MAX_SIDE}x{BRUTE_FORCE_MAX_SIDE}")
    if fg.all():
        return np.full(fg.shape, -default_radius(fg.shape))
    if not fg.any():
        return np.full(fg.shape, default_radius(fg.shape))
    rr, cc = np.mgrid[0:h, 0:w]
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1)
    flat = fg.ravel()
    out = np.empty(h * w)
    for i, (r, c) in enumerate(coords):
        others = coords[flat != flat[i]]
        d2 = ((others - (r, c)) ** 2).sum(axis=1).min()
        out[i] = np.sqrt(float(d2))
        if flat[i]:
            out[i] = -out[i]
    return out.reshape(h, w)


def signed_distance(mask, truncation_radius: float | None = None) -> np.ndarray:
    """Signed distance clamped to +-radius and divided by it, so values lie in [-1, 1]."""
    fg = _check_mask(mask)
    if truncation_radius is None:
        radius = max(1.0, default_radius(fg.shape))
    else:
        radius = float(truncation_radius)
    if radius < 1:
        raise ValueError("truncation_radius must be >= 1")
    if fg.all():
        return -np.ones(fg.shape)
    if not fg.any():
        return np.ones(fg.shape)
    return np.clip(raw_signed_distance(fg), -radius, radius) / radius


def lsf_to_mask(level_set: Tensor, k: float) -> Tensor:
    """Soft mask from a level-set map: sigmoid(-k * L), ~1 inside, ~0 outside."""
    if k <= 0:
        raise ValueError("k must be positive")
    return sigmoid(level_set * (-float(k)))
