"""Central finite-difference checks for every differentiable loss.

Each check draws a seeded random problem, evaluates the analytic gradient once
and compares it with central differences on a random subset of input
coordinates. The losses are piecewise smooth (absolute values, hinges, argmin
selection, bilinear cell boundaries, validity masks), so every check also
records a discrete *regime* signature; coordinates whose finite-difference
stencil changes the regime straddle a kink and are skipped (and counted).
The error is ``||analytic - numeric|| / max(||analytic||, ||numeric||)`` over
the checked coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import panoptic_losses as pl
from . import photometric as ph
from .core import Intrinsics, PanopticMap, PoseSE3
from .geometry import rotation_from_euler

EPS = 1e-3
RTOL = 1e-4
OPS = ("ssim", "photometric_error", "multiscale_photometric", "smoothness", "pgs", "ped", "pgt")


@dataclass
class CheckResult:
    op: str
    seed: int
    rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self):
        return self.rel_error < RTOL


@dataclass
class OpReport:
    op: str
    results: list
    seconds: float

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    @property
    def worst(self):
        return max(r.rel_error for r in self.results)

    @property
    def checked(self):
        return sum(r.checked for r in self.results)

    @property
    def skipped(self):
        return sum(r.skipped for r in self.results)


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def _evaluate(func, regime, x):
    out = func(x)
    if isinstance(out, tuple):
        return out
    return out, (None if regime is None else regime(x))


def numeric_gradient(func, x, indices, eps=EPS, regime=None):
    """Central differences of scalar ``func`` at flat ``indices`` of ``x``.

    ``func`` may return ``(value, regime_signature)`` itself; otherwise the
    optional ``regime`` callable supplies the signature. Returns
    ``(values, smooth)`` where ``smooth`` is False for coordinates whose
    stencil changes the signature.
    """
    x = np.array(x, dtype=np.float64)
    _, base = _evaluate(func, regime, x)
    values = np.zeros(len(indices))
    smooth = np.ones(len(indices), dtype=bool)
    for k, i in enumerate(indices):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        f_plus, r_plus = _evaluate(func, regime, x)
        x.flat[i] = orig - eps
        f_minus, r_minus = _evaluate(func, regime, x)
        x.flat[i] = orig
        values[k] = (f_plus - f_minus) / (2 * eps)
        if base is not None:
            smooth[k] = np.array_equal(r_plus, base) and np.array_equal(r_minus, base)
    return values, smooth


def compare(op, seed, func, x, analytic, n_coords, rng, regime=None, eps=EPS):
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n_coords = min(n_coords, x.size)
    # half the coordinates come from the gradient support so sparse gradients
    # (contour-only terms) are not checked mostly at trivial zeros
    support = np.flatnonzero(analytic)
    n_support = min(n_coords // 2, support.size)
    picked = rng.choice(support, size=n_support, replace=False) if n_support else np.zeros(0, int)
    rest = np.setdiff1d(np.arange(x.size), picked)
    indices = np.sort(np.concatenate([picked, rng.choice(rest, size=n_coords - n_support, replace=False)]))
    numeric, smooth = numeric_gradient(func, x, indices, eps, regime)
    rel = relative_error(analytic[indices][smooth], numeric[smooth])
    return CheckResult(op, seed, rel, int(smooth.sum()), int((~smooth).sum()))


# -- random problems -------------------------------------------------------------


def random_panoptic(rng, height, width, n_rects=6, thing_class=2):
    """Layered random rectangles over a stuff background, with a little void."""
    cls = np.zeros((height, width), dtype=np.int32)
    inst = np.zeros((height, width), dtype=np.int32)
    next_id = 1
    for _ in range(n_rects):
        h = rng.integers(2, height // 2 + 1)
        w = rng.integers(2, width // 2 + 1)
        top = rng.integers(0, height - h + 1)
        left = rng.integers(0, width - w + 1)
        c = int(rng.integers(0, thing_class + 1))
        cls[top : top + h, left : left + w] = c
        if c == thing_class:
            inst[top : top + h, left : left + w] = next_id
            next_id += 1
        else:
            inst[top : top + h, left : left + w] = 0
    void = rng.random((height, width)) < 0.03
    cls[void] = 255
    inst[void] = 0
    return PanopticMap(cls, inst, {thing_class})


def random_disparity(rng, height, width):
    """Positive disparity whose neighbour differences stay away from zero."""
    rows = np.cumsum(rng.choice([-1, 1], height) * rng.uniform(0.05, 0.15, height))
    cols = np.cumsum(rng.choice([-1, 1], width) * rng.uniform(0.05, 0.15, width))
    d = rows[:, None] + cols[None, :]
    return d - d.min() + 0.5 + rng.uniform(-0.01, 0.01, (height, width))


def _sign_regime(d):
    dx, dy = d[:, 1:] - d[:, :-1], d[1:, :] - d[:-1, :]
    return np.concatenate([np.sign(dx).ravel(), np.sign(dy).ravel()])


def _smooth_image(rng, channels, height, width):
    img = gaussian_filter(rng.uniform(0, 1, (channels, height, width)), (0, 1.2, 1.2))
    img -= img.min()
    return img / img.max()


# -- per-op checks ----------------------------------------------------------------


def _apply_fault(grad, fault):
    return grad * 1.05 if fault else grad


def check_ssim(seed, n_coords=64, fault=False):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (1, 16, 16))
    b = rng.uniform(0, 1, (1, 16, 16))
    w = rng.normal(size=(16, 16))
    grad = _apply_fault(ph.ssim_vjp(a, b, w), fault)
    return compare("ssim", seed, lambda x: np.sum(w * ph.ssim(x, b)), a, grad, n_coords, rng)


def check_photometric_error(seed, n_coords=64, fault=False):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0.3, 0.7, (1, 16, 16))
    synth = target + rng.choice([-1, 1], target.shape) * rng.uniform(0.05, 0.25, target.shape)
    w = rng.normal(size=(16, 16))
    grad = _apply_fault(ph.photometric_error_vjp(target, synth, w), fault)
    return compare(
        "photometric_error", seed,
        lambda x: np.sum(w * ph.photometric_error(target, x)),
        synth, grad, n_coords, rng,
        regime=lambda x: np.sign(x - target).ravel(),
    )


def _multiscale_problem(rng):
    height = width = 16
    target = _smooth_image(rng, 3, height, width)
    sources = [_smooth_image(rng, 3, height, width) for _ in range(2)]
    K = Intrinsics(16.0, 16.0, 7.5, 7.5)
    poses = [
        PoseSE3(rotation_from_euler(*rng.normal(0, 0.01, 3)), rng.normal(0, 0.01, 3))
        for _ in sources
    ]
    levels = [rng.uniform(0.4, 0.8, s) for s in ph.pyramid_shapes(height, width)]
    return levels, target, sources, poses, K


def check_multiscale_photometric(seed, n_coords=16, fault=False):
    rng = np.random.default_rng(seed)
    levels, target, sources, poses, K = _multiscale_problem(rng)
    sizes = [lv.size for lv in levels]
    splits = np.cumsum(sizes)[:-1]
    shapes = [lv.shape for lv in levels]
    full = (16, 16)

    def unpack(x):
        return ph.ScalePyramid([p.reshape(s) for p, s in zip(np.split(x, splits), shapes)], full)

    flat = np.concatenate([lv.ravel() for lv in levels])
    _, grads, _ = ph._multiscale(unpack(flat), target, sources, poses, K)
    analytic = _apply_fault(np.concatenate([g.ravel() for g in grads]), fault)

    def value(x):
        res = ph._multiscale(unpack(x), target, sources, poses, K, need_grad=False)
        return res[0], res[2]

    # stratify so every pyramid level is represented
    per_level = max(1, n_coords // len(levels))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    indices = np.sort(np.concatenate([
        offsets[i] + rng.choice(size, size=min(per_level, size), replace=False)
        for i, size in enumerate(sizes)
    ]))
    numeric, smooth = numeric_gradient(value, flat, indices, EPS)
    rel = relative_error(analytic[indices][smooth], numeric[smooth])
    return CheckResult("multiscale_photometric", seed, rel, int(smooth.sum()), int((~smooth).sum()))


def _disparity_problem(seed):
    rng = np.random.default_rng(seed)
    d = random_disparity(rng, 20, 20)
    pan = random_panoptic(rng, 20, 20)
    while not _has_contour(pan):
        pan = random_panoptic(rng, 20, 20)
    return rng, d, pan


def _has_contour(pan):
    c = pl.panoptic_contour(pan)
    return bool(c.horizontal.data.any() or c.vertical.data.any())


def check_smoothness(seed, n_coords=64, fault=False):
    rng, d, _ = _disparity_problem(seed)
    image = _smooth_image(rng, 3, 20, 20)
    grad = _apply_fault(np.asarray(pl.smoothness(d, image).gradient, dtype=np.float64), fault)
    return compare("smoothness", seed, lambda x: pl.smoothness(x, image).value, d, grad,
                   n_coords, rng, regime=_sign_regime)


def check_pgs(seed, n_coords=64, fault=False):
    rng, d, pan = _disparity_problem(seed)
    grad = _apply_fault(np.asarray(pl.pgs(d, pan).gradient, dtype=np.float64), fault)
    return compare("pgs", seed, lambda x: pl.pgs(x, pan).value, d, grad, n_coords, rng,
                   regime=_sign_regime)


def check_ped(seed, n_coords=64, fault=False):
    rng, d, pan = _disparity_problem(seed)
    grad = _apply_fault(np.asarray(pl.ped(d, pan).gradient, dtype=np.float64), fault)
    return compare("ped", seed, lambda x: pl.ped(x, pan).value, d, grad, n_coords, rng,
                   regime=_sign_regime)


def check_pgt(seed, n_coords=64, fault=False):
    rng = np.random.default_rng(seed)
    pan = random_panoptic(rng, 20, 20, n_rects=8)
    feats = rng.normal(size=(4, 20, 20))
    feats /= np.linalg.norm(feats, axis=0, keepdims=True)
    grad = _apply_fault(np.asarray(pl.pgt(feats, pan).gradient, dtype=np.float64), fault)

    def regime(x):
        kept, pos, neg, _ = pl._triplet_layout(pan, pl.DEFAULT_PATCH)
        # hinge activity per kept patch is the only non-smooth decision here
        patches, _ = pl._patches(x, pl.DEFAULT_PATCH)
        diff = patches - patches[:, :, 12:13]
        dist = np.sqrt((diff**2).sum(axis=1))
        d_pos = (dist * pos).sum(1) / np.maximum(pos.sum(1), 1)
        d_neg = (dist * neg).sum(1) / np.maximum(neg.sum(1), 1)
        return (d_pos + pl.DEFAULT_MARGIN - d_neg > 0)[kept]

    return compare("pgt", seed, lambda x: pl.pgt(x, pan).value, feats, grad, n_coords, rng,
                   regime=regime)


CHECKS = {
    "ssim": check_ssim,
    "photometric_error": check_photometric_error,
    "multiscale_photometric": check_multiscale_photometric,
    "smoothness": check_smoothness,
    "pgs": check_pgs,
    "ped": check_ped,
    "pgt": check_pgt,
}


def run_suite(seed=0, trials=100, ops=OPS, fault=None):
    """Run every check for ``trials`` consecutive seeds starting at ``seed``.

    ``fault`` names an op whose analytic gradient is deliberately perturbed
    (negative control for the harness itself).
    """
    reports = []
    for op in ops:
        start = time.perf_counter()
        results = [CHECKS[op](seed + k, fault=(op == fault)) for k in range(trials)]
        reports.append(OpReport(op, results, time.perf_counter() - start))
    return reports
