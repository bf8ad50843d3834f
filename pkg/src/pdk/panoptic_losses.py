"""Smoothness and panoptic-guided depth losses with analytic gradients.

Disparity-based losses work on the mean-normalized disparity and return the
gradient w.r.t. the raw (un-normalized) disparity. Pairwise terms use forward
differences; each direction is averaged over its own number of pixel pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DegenerateInputError, LossResult, MaskMap, ParameterError, as_array
from .geometry import downsample_nearest

DEFAULT_MARGIN = 0.3
DEFAULT_PATCH = 5


@dataclass(frozen=True, eq=False)
class ContourMap:
    """Panoptic edges: ``horizontal[v, u]`` flags (u, v)|(u+1, v), ``vertical`` (u, v)|(u, v+1)."""

    horizontal: MaskMap
    vertical: MaskMap


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """``(C, H, W)`` features with unit L2 norm at every pixel."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ParameterError("feature map must be (C,H,W)")
        norms = np.linalg.norm(data.astype(np.float64), axis=0)
        if not np.all(np.abs(norms - 1.0) <= 1e-5):
            raise ParameterError("features must be L2-normalized per pixel")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def normalized(cls, raw):
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw / np.linalg.norm(raw, axis=0, keepdims=True))


def _disparity(d):
    d = as_array(d)
    if d.ndim != 2:
        raise ParameterError("disparity must be 2-D")
    return d


def mean_normalize_disparity(d):
    """Divide disparity by its mean."""
    d = _disparity(d)
    mean = d.mean() if d.size else 0.0
    if not mean > 0:
        raise DegenerateInputError("disparity mean must be positive")
    return d / mean


def _mean_normalize_vjp(d, g):
    mean = d.mean()
    return g / mean - np.sum(g * d) / (mean**2 * d.size)


def _forward_diffs(x):
    return x[:, 1:] - x[:, :-1], x[1:, :] - x[:-1, :]


def _scatter_diffs(gx, gy, shape):
    """Adjoint of :func:`_forward_diffs`."""
    out = np.zeros(shape)
    out[:, 1:] += gx
    out[:, :-1] -= gx
    out[1:, :] += gy
    out[:-1, :] -= gy
    return out


def _weighted_abs_diff_loss(d, weight_x, weight_y):
    """``mean(|dx| wx) + mean(|dy| wy)`` on normalized disparity, with gradient."""
    dn = mean_normalize_disparity(d)
    dx, dy = _forward_diffs(dn)
    value = 0.0
    gx = np.zeros_like(dx)
    gy = np.zeros_like(dy)
    if dx.size:
        value += np.mean(np.abs(dx) * weight_x)
        gx = np.sign(dx) * weight_x / dx.size
    if dy.size:
        value += np.mean(np.abs(dy) * weight_y)
        gy = np.sign(dy) * weight_y / dy.size
    grad = _mean_normalize_vjp(d, _scatter_diffs(gx, gy, d.shape))
    return float(value), grad


def smoothness(d, image):
    """Edge-aware smoothness: disparity gradients damped by ``exp(-|image gradient|)``."""
    d = _disparity(d)
    img = as_array(image)
    if img.ndim == 2:
        img = img[None]
    if img.shape[1:] != d.shape:
        raise ParameterError("image and disparity must share spatial shape")
    ix, iy = _forward_diffs(np.moveaxis(img, 0, -1))
    weight_x = np.exp(-np.abs(ix).mean(axis=-1))
    weight_y = np.exp(-np.abs(iy).mean(axis=-1))
    value, grad = _weighted_abs_diff_loss(d, weight_x, weight_y)
    return LossResult(value, grad, "disparity")


def _contour_arrays(pan):
    keys = pan.segment_ids()
    void = keys < 0
    horiz = np.zeros(pan.shape, dtype=bool)
    vert = np.zeros(pan.shape, dtype=bool)
    horiz[:, :-1] = (keys[:, :-1] != keys[:, 1:]) & ~void[:, :-1] & ~void[:, 1:]
    vert[:-1, :] = (keys[:-1, :] != keys[1:, :]) & ~void[:-1, :] & ~void[1:, :]
    return horiz, vert


def panoptic_contour(pan):
    """Iverson bracket of differing (class, instance) between neighbours; void suppresses edges."""
    horiz, vert = _contour_arrays(pan)
    return ContourMap(MaskMap(horiz), MaskMap(vert))


def _check_pan(d, pan):
    if pan.shape != d.shape:
        raise ParameterError("panoptic map and disparity must share shape")


def pgs(d, pan):
    """Smoothness restricted to pixel pairs inside the same panoptic segment."""
    d = _disparity(d)
    _check_pan(d, pan)
    horiz, vert = _contour_arrays(pan)
    value, grad = _weighted_abs_diff_loss(
        d, 1.0 - horiz[:, :-1].astype(float), 1.0 - vert[:-1, :].astype(float)
    )
    return LossResult(value, grad, "disparity")


def ped(d, pan):
    """Edge discontinuity: mean of ``exp(-|disparity step|)`` over panoptic edge pairs."""
    d = _disparity(d)
    _check_pan(d, pan)
    horiz, vert = _contour_arrays(pan)
    ex, ey = horiz[:, :-1], vert[:-1, :]
    n_edges = int(ex.sum() + ey.sum())
    if n_edges == 0:
        return LossResult(0.0, np.zeros_like(d), "disparity")
    dn = mean_normalize_disparity(d)
    dx, dy = _forward_diffs(dn)
    tx = np.exp(-np.abs(dx)) * ex
    ty = np.exp(-np.abs(dy)) * ey
    value = (tx.sum() + ty.sum()) / n_edges
    gx = -np.sign(dx) * tx / n_edges
    gy = -np.sign(dy) * ty / n_edges
    grad = _mean_normalize_vjp(d, _scatter_diffs(gx, gy, d.shape))
    return LossResult(value, grad, "disparity")


# -- panoptic-guided triplet -------------------------------------------------------


def _patches(x, patch):
    """``(..., H, W)`` -> ``(n_patches, ..., patch*patch)`` over a top-left tiling."""
    rows, cols = x.shape[-2] // patch, x.shape[-1] // patch
    x = x[..., : rows * patch, : cols * patch]
    lead = x.shape[:-2]
    x = x.reshape(lead + (rows, patch, cols, patch))
    x = np.moveaxis(x, (-4, -2), (0, 1))
    return x.reshape((rows * cols,) + lead + (patch * patch,)), (rows, cols)


def _unpatch(p, grid, patch, shape):
    rows, cols = grid
    lead = p.shape[1:-1]
    x = p.reshape((rows, cols) + lead + (patch, patch))
    x = np.moveaxis(x, (0, 1), (-4, -2)).reshape(lead + (rows * patch, cols * patch))
    out = np.zeros(lead + tuple(shape))
    out[..., : rows * patch, : cols * patch] = x
    return out


def _triplet_layout(pan, patch):
    """Kept patches with their anchor, positive and negative memberships."""
    keys, grid = _patches(pan.segment_ids(), patch)
    center = (patch * patch) // 2
    anchor = keys[:, center]
    valid = keys >= 0
    pos = (keys == anchor[:, None]) & valid
    pos[:, center] = False
    neg = (keys != anchor[:, None]) & valid
    has_edge = np.zeros(len(keys), dtype=bool)
    k2 = keys.reshape(len(keys), patch, patch)
    v2 = k2 >= 0
    has_edge |= np.any((k2[:, :, 1:] != k2[:, :, :-1]) & v2[:, :, 1:] & v2[:, :, :-1], axis=(1, 2))
    has_edge |= np.any((k2[:, 1:, :] != k2[:, :-1, :]) & v2[:, 1:, :] & v2[:, :-1, :], axis=(1, 2))
    kept = has_edge & (anchor >= 0) & pos.any(axis=1) & neg.any(axis=1)
    return kept, pos, neg, grid


def pgt(features, pan, patch=DEFAULT_PATCH, margin=DEFAULT_MARGIN, reduction="mean"):
    """Patch-wise triplet loss on depth features guided by panoptic contours.

    The map is tiled into non-overlapping ``patch x patch`` blocks from the top
    left; blocks without an internal panoptic edge, with a void anchor, or
    with an empty positive/negative set are dropped. ``reduction`` selects how
    anchor distances are pooled within each set (``"mean"`` or ``"min"``).
    """
    if patch % 2 != 1 or patch < 3:
        raise ParameterError("patch size must be an odd integer >= 3")
    if reduction not in ("mean", "min"):
        raise ParameterError("reduction must be 'mean' or 'min'")
    feats = as_array(features)
    if feats.ndim != 3 or feats.shape[1:] != pan.shape:
        raise ParameterError("features must be (C,H,W) matching the panoptic map")
    kept, pos, neg, grid = _triplet_layout(pan, patch)
    if not kept.any():
        return LossResult(0.0, np.zeros_like(feats), "features")
    fp, _ = _patches(feats, patch)  # (n, C, P)
    center = (patch * patch) // 2
    fp, pos, neg = fp[kept], pos[kept], neg[kept]
    diff = fp - fp[:, :, center : center + 1]
    dist = np.sqrt(np.sum(diff**2, axis=1))  # (n, P)
    if reduction == "mean":
        w_pos = pos / pos.sum(axis=1, keepdims=True)
        w_neg = neg / neg.sum(axis=1, keepdims=True)
    else:
        rows = np.arange(len(dist))
        w_pos = np.zeros_like(dist)
        w_neg = np.zeros_like(dist)
        w_pos[rows, np.argmin(np.where(pos, dist, np.inf), axis=1)] = 1.0
        w_neg[rows, np.argmin(np.where(neg, dist, np.inf), axis=1)] = 1.0
    d_pos = np.sum(w_pos * dist, axis=1)
    d_neg = np.sum(w_neg * dist, axis=1)
    hinge = d_pos + margin - d_neg
    n_kept = len(hinge)
    value = np.sum(np.maximum(hinge, 0.0)) / n_kept

    active = (hinge > 0)[:, None] / n_kept
    coef = (w_pos - w_neg) * active
    unit = np.divide(diff, dist[:, None, :], out=np.zeros_like(diff), where=dist[:, None, :] > 0)
    g_patch = coef[:, None, :] * unit
    g_patch[:, :, center] -= g_patch.sum(axis=2)
    full = np.zeros((len(kept),) + g_patch.shape[1:])
    full[kept] = g_patch
    grad = _unpatch(full, grid, patch, pan.shape)
    return LossResult(value, grad, "features")


def pgt_multiscale(features, pan, patch=DEFAULT_PATCH, margin=DEFAULT_MARGIN, reduction="mean"):
    """Average of :func:`pgt` over feature maps at several scales.

    The panoptic map is nearest-subsampled to each feature resolution; the
    gradient is a tuple with one entry per scale.
    """
    if len(features) == 0:
        raise ParameterError("need at least one feature map")
    values, grads = [], []
    for feat in features:
        feat = as_array(feat)
        scaled = pan if feat.shape[1:] == pan.shape else downsample_nearest(pan, feat.shape[1:])
        res = pgt(feat, scaled, patch, margin, reduction)
        values.append(res.value)
        grads.append(np.asarray(res.gradient, dtype=np.float64) / len(features))
    return LossResult(float(np.mean(values)), tuple(grads), "features")
