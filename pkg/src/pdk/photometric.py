"""Photometric reconstruction loss with analytic gradients.

Per-pixel error maps are returned as ``(H, W)`` arrays. Gradients of map-valued
functions are exposed as vector-Jacobian products (``*_vjp``): given an upstream
weight map ``g`` they return the gradient of ``sum(g * map)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LossResult, ParameterError, as_array
from .geometry import (
    bilinear_sample,
    bilinear_sample_grad,
    downsample_mean,
    reproject_with_jacobian,
    resize_bilinear,
    resize_bilinear_adjoint,
)

C1 = 0.01**2
C2 = 0.03**2
DEFAULT_ALPHA = 0.85
MIN_DEPTH = 0.1
MAX_DEPTH = 100.0
PYRAMID_STRIDES = (2, 4, 8, 16)


def _as_planes(x):
    x = as_array(x)
    return x[None] if x.ndim == 2 else x


# -- 3x3 mean filter with reflection padding, and its adjoint ----------------


def _box3(x, axis):
    n = x.shape[axis]
    if n == 1:
        return x.copy()
    x = np.moveaxis(x, axis, -1)
    padded = np.concatenate([x[..., 1:2], x, x[..., n - 2 : n - 1]], axis=-1)
    out = (padded[..., :-2] + padded[..., 1:-1] + padded[..., 2:]) / 3.0
    return np.moveaxis(out, -1, axis)


def _box3_adjoint(g, axis):
    n = g.shape[axis]
    if n == 1:
        return g.copy()
    g = np.moveaxis(g, axis, -1) / 3.0
    padded = np.zeros(g.shape[:-1] + (n + 2,))
    padded[..., 0:n] += g
    padded[..., 1 : n + 1] += g
    padded[..., 2 : n + 2] += g
    out = padded[..., 1 : n + 1].copy()
    out[..., 1] += padded[..., 0]
    out[..., n - 2] += padded[..., n + 1]
    return np.moveaxis(out, -1, axis)


def mean_filter(x):
    """3x3 box mean over the last two axes with reflection padding."""
    height, width = x.shape[-2:]
    if height == 1 or width == 1:
        return _box3(_box3(x, -1), -2)
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(x, pad, mode="reflect")
    rows = p[..., :-2, :] + p[..., 1:-1, :] + p[..., 2:, :]
    return (rows[..., :-2] + rows[..., 1:-1] + rows[..., 2:]) / 9.0


def mean_filter_adjoint(g):
    return _box3_adjoint(_box3_adjoint(g, -2), -1)


# -- SSIM --------------------------------------------------------------------


def _ssim_terms(a, b):
    mu_a, mu_b = mean_filter(a), mean_filter(b)
    var_a = mean_filter(a * a) - mu_a**2
    var_b = mean_filter(b * b) - mu_b**2
    cov = mean_filter(a * b) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * cov + C2
    den1 = mu_a**2 + mu_b**2 + C1
    den2 = var_a + var_b + C2
    return mu_a, mu_b, num1, num2, den1, den2


def _check_pair(a, b):
    a, b = _as_planes(a), _as_planes(b)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def ssim(a, b):
    """Per-pixel SSIM (3x3 window, reflection padding), averaged over channels."""
    a, b = _check_pair(a, b)
    _, _, num1, num2, den1, den2 = _ssim_terms(a, b)
    return (num1 * num2 / (den1 * den2)).mean(axis=0)


def ssim_vjp(a, b, grad_map):
    """Gradient of ``sum(grad_map * ssim(a, b))`` w.r.t. ``a``."""
    a, b = _check_pair(a, b)
    g = np.asarray(grad_map, dtype=np.float64)[None] / a.shape[0]
    mu_a, mu_b, num1, num2, den1, den2 = _ssim_terms(a, b)
    s = num1 * num2 / (den1 * den2)
    d_num1 = num2 / (den1 * den2)
    d_num2 = num1 / (den1 * den2)
    d_den1 = -s / den1
    d_den2 = -s / den2
    # partials w.r.t. the filtered quantities mu_a, E[a^2], E[ab]
    d_mu = d_num1 * 2 * mu_b - d_num2 * 2 * mu_b + d_den1 * 2 * mu_a - d_den2 * 2 * mu_a
    d_eaa = d_den2
    d_eab = 2 * d_num2
    return (
        mean_filter_adjoint(g * d_mu)
        + 2 * a * mean_filter_adjoint(g * d_eaa)
        + b * mean_filter_adjoint(g * d_eab)
    )


# -- photometric error ---------------------------------------------------------


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")


def photometric_error(target, synth, alpha=DEFAULT_ALPHA):
    """``alpha/2 * (1 - SSIM) + (1 - alpha) * L1`` per pixel, L1 averaged over channels."""
    _check_alpha(alpha)
    target, synth = _check_pair(target, synth)
    l1 = np.abs(target - synth).mean(axis=0)
    pe = alpha / 2 * (1 - ssim(target, synth)) + (1 - alpha) * l1
    return np.maximum(pe, 0.0)


def photometric_error_vjp(target, synth, grad_map, alpha=DEFAULT_ALPHA):
    """Gradient of ``sum(grad_map * photometric_error(target, synth))`` w.r.t. ``synth``."""
    _check_alpha(alpha)
    target, synth = _check_pair(target, synth)
    g = np.asarray(grad_map, dtype=np.float64)
    grad = -alpha / 2 * ssim_vjp(synth, target, g)
    grad += (1 - alpha) * np.sign(synth - target) * (g[None] / synth.shape[0])
    return grad


def min_reprojection(errors):
    """Per-pixel minimum over a list of error maps, with the winning index.

    Ties resolve to the lowest index.
    """
    if len(errors) == 0:
        raise ParameterError("min_reprojection needs at least one error map")
    stack = np.stack([np.asarray(getattr(e, "data", e), dtype=np.float64) for e in errors])
    arg = np.argmin(stack, axis=0)
    return np.take_along_axis(stack, arg[None], axis=0)[0], arg


def automask(pe_synth, pe_identity):
    """1 where warping beats the unwarped source (strictly), else 0."""
    return (as_array(pe_synth) < as_array(pe_identity)).astype(np.uint8)


def masked_mean(values, mask):
    """Mean of ``values`` over ``mask``; 0 on an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0
    return float(np.sum(np.where(mask, values, 0.0)) / count), count


# -- disparity, pyramids -------------------------------------------------------


def disp_to_depth(disp, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    """Map disparity in [0, 1] to depth in [min_depth, max_depth]."""
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return 1.0 / (lo + (hi - lo) * np.asarray(disp, dtype=np.float64))


def depth_to_disp(depth, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return (1.0 / np.asarray(depth, dtype=np.float64) - lo) / (hi - lo)


def pyramid_shapes(height, width):
    return [(-(-height // s), -(-width // s)) for s in PYRAMID_STRIDES]


@dataclass(frozen=True, eq=False)
class ScalePyramid:
    """Disparity at output strides 2, 4, 8 and 16 of a ``full_shape`` image."""

    levels: tuple
    full_shape: tuple

    def __post_init__(self):
        levels = tuple(np.asarray(getattr(lv, "data", lv), dtype=np.float64) for lv in self.levels)
        full_shape = tuple(int(s) for s in self.full_shape)
        if len(levels) != len(PYRAMID_STRIDES):
            raise ParameterError("a scale pyramid has exactly four levels")
        for level, shape in zip(levels, pyramid_shapes(*full_shape)):
            if level.shape != shape:
                raise ParameterError(f"pyramid level shape {level.shape} != expected {shape}")
            if not np.all(np.isfinite(level)) or np.any(level < 0):
                raise ParameterError("disparity must be finite and non-negative")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "full_shape", full_shape)

    @classmethod
    def from_disparity(cls, disp):
        """Build all levels by block-averaging a full-resolution disparity map."""
        disp = as_array(disp)
        return cls(tuple(downsample_mean(disp, s) for s in PYRAMID_STRIDES), disp.shape)

    @classmethod
    def from_depth(cls, depth, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
        return cls.from_disparity(depth_to_disp(as_array(depth), min_depth, max_depth))

    @property
    def half_shape(self):
        return self.levels[0].shape


def _multiscale(pyramid, target, sources, poses, K, alpha=DEFAULT_ALPHA, extra_mask=None,
                use_automask=True, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH, need_grad=True):
    """Shared implementation; also returns a regime signature for gradient checks."""
    if not isinstance(pyramid, ScalePyramid):
        raise ParameterError("pyramid must be a ScalePyramid")
    _check_alpha(alpha)
    target = _as_planes(target)
    sources = [_as_planes(s) for s in sources]
    if not sources:
        raise ParameterError("at least one source image is required")
    if len(poses) != len(sources):
        raise ParameterError("need one pose per source image")
    if target.shape[1:] != pyramid.full_shape or any(s.shape != target.shape for s in sources):
        raise ParameterError("images must match the pyramid's full resolution")
    half = pyramid.half_shape
    if extra_mask is None:
        extra = np.ones(half, dtype=bool)
    else:
        extra = np.asarray(getattr(extra_mask, "data", extra_mask)).astype(bool)
        if extra.shape != half:
            raise ParameterError(f"extra_mask must be at half resolution {half}")

    target_h = downsample_mean(target, 2)
    sources_h = [downsample_mean(s, 2) for s in sources]
    K_h = K.rescaled(0.5)
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    if use_automask:
        identity_min, _ = min_reprojection(
            [photometric_error(target_h, s, alpha) for s in sources_h]
        )

    n_levels = len(pyramid.levels)
    total = 0.0
    grads = []
    regime = []
    for level in pyramid.levels:
        up = resize_bilinear(level, half)
        scaled = lo + (hi - lo) * up
        depth = 1.0 / scaled
        per_source = []
        errors = []
        for src_h, pose in zip(sources_h, poses):
            coords, _, jac = reproject_with_jacobian(depth, pose, K_h)
            synth, smask = bilinear_sample(src_h, coords)
            pe = photometric_error(target_h, synth, alpha)
            errors.append(np.where(smask > 0, pe, np.inf))
            per_source.append((coords, jac, synth))
        best, arg = min_reprojection(errors)
        keep = np.isfinite(best) & extra
        if use_automask:
            keep &= best < identity_min
        loss, count = masked_mean(best, keep)
        total += loss / n_levels
        # discrete decisions the loss depends on: winners and support; the L1
        # sign at contributing pixels; bilinear cell and sampling mask over
        # the SSIM window of contributing pixels
        regime.append(arg.ravel())
        regime.append(keep.ravel())
        for s, ((coords, _, synth), err) in enumerate(zip(per_source, errors)):
            used = keep & (arg == s)
            window = mean_filter(used.astype(np.float64)) > 0
            cell = np.where(np.isfinite(err)[..., None], np.floor(coords), -2)
            regime.append(np.where(window[..., None], cell, -3).astype(np.int64).ravel())
            regime.append(np.where(used, np.sign(synth - target_h), 0).astype(np.int64).ravel())

        if not need_grad:
            continue
        g_depth = np.zeros(half)
        if count:
            for s, (src_h, (coords, jac, synth)) in enumerate(zip(sources_h, per_source)):
                upstream = (keep & (arg == s)) / (count * n_levels)
                if not upstream.any():
                    continue
                g_synth = photometric_error_vjp(target_h, synth, upstream, alpha)
                g_coords = bilinear_sample_grad(src_h, coords, g_synth)
                g_depth += (g_coords * jac).sum(axis=-1)
        g_up = g_depth * (-(hi - lo) / scaled**2)
        grads.append(resize_bilinear_adjoint(g_up, level.shape))
    return total, tuple(grads), np.concatenate(regime)


def multiscale_photometric(pyramid, target, sources, poses, K, alpha=DEFAULT_ALPHA,
                           extra_mask=None, use_automask=True,
                           min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    """Photometric loss averaged over the four pyramid levels.

    Each level is upsampled to half resolution, converted to depth and used to
    synthesize the target from every source. Per level the loss is the mean of
    the per-pixel minimum reprojection error over pixels that are validly
    sampled, pass the stationary-pixel auto-mask and ``extra_mask``. ``poses``
    map target camera coordinates to each source camera, and ``K`` describes
    the full-resolution camera. The gradient is one array per pyramid level.
    """
    value, grads, _ = _multiscale(
        pyramid, target, sources, poses, K, alpha, extra_mask, use_automask, min_depth, max_depth
    )
    return LossResult(value, grads, "pyramid")


def view_synthesis(depth, source, pose, K):
    """Synthesize the target view from ``source`` given target depth; returns (image, mask)."""
    coords, _, _ = reproject_with_jacobian(depth, pose, K)
    return bilinear_sample(_as_planes(source), coords)
