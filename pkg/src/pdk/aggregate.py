"""Weighted combination of the training losses.

The depth loss mixes photometric, smoothness and panoptic-guided terms; the
total adds the supervised semantic/instance heads and the flow photometric
term. Auxiliary losses here take predictions as plain arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .core import LossResult, ParameterError, as_array
from .geometry import warp_image
from .photometric import DEFAULT_ALPHA, masked_mean, photometric_error

DEPTH_TERMS = ("photo", "sm", "pgs", "ped", "pgt")
TOTAL_TERMS = ("depth", "sem", "instance", "optical")
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    gamma_depth: float = 50.0
    gamma_sem: float = 1.0
    gamma_instance: float = 1.0
    gamma_optical: float = 10.0
    gamma_photo: float = 1.0
    gamma_sm: float = 0.001
    gamma_pgs: float = 0.01
    gamma_ped: float = 0.0001
    gamma_pgt: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            value = float(getattr(self, f.name))
            if not (np.isfinite(value) and value >= 0):
                raise ParameterError(f"{f.name} must be a finite non-negative number")
            object.__setattr__(self, f.name, value)

    def replace(self, **changes):
        return LossWeights(**{**asdict(self), **changes})

    def to_lines(self):
        return [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]


def default_weights():
    return LossWeights()


def load_weights(path, base=None):
    """Read ``key=value`` lines over ``base`` (defaults); unknown keys are rejected.

    Blank lines and ``#`` comments are ignored. Keys may omit the ``gamma_``
    prefix.
    """
    base = default_weights() if base is None else base
    known = {f.name for f in fields(LossWeights)}
    changes = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ParameterError(f"{path}:{lineno}: expected key=value")
        if key not in known and f"gamma_{key}" in known:
            key = f"gamma_{key}"
        if key not in known:
            raise ParameterError(f"{path}:{lineno}: unknown weight {key!r}")
        try:
            changes[key] = float(value)
        except ValueError:
            raise ParameterError(f"{path}:{lineno}: {value.strip()!r} is not a number") from None
    return base.replace(**changes)


@dataclass(frozen=True)
class LossBreakdown:
    """Named component values, their weighted contributions and the total."""

    components: dict
    weighted: dict
    total: float
    gradients: dict = None

    def __getitem__(self, name):
        return self.components[name]

    def lines(self, fmt="{:.6g}"):
        out = [f"{name}: {fmt.format(v)} (weighted {fmt.format(self.weighted[name])})"
               for name, v in self.components.items()]
        out.append(f"total: {fmt.format(self.total)}")
        return out


def _value(x):
    if isinstance(x, LossResult):
        return x.value
    if isinstance(x, LossBreakdown):
        return x.total
    value = float(x)
    if not np.isfinite(value):
        raise ParameterError("loss components must be finite")
    return value


def _combine(terms, weights):
    """Weighted sum in a fixed order, plus same-shape gradient combination."""
    components = {name: _value(x) for name, x in terms.items()}
    weighted = {name: weights[name] * components[name] for name in terms}
    total = 0.0
    for name in terms:
        total += weighted[name]
    grads = {}
    for name, x in terms.items():
        grad = getattr(x, "gradient", None)
        if grad is None:
            continue
        key = getattr(x, "grad_input_name", "") or name
        parts = grad if isinstance(grad, tuple) else (grad,)
        scaled = tuple(weights[name] * np.asarray(g, dtype=np.float64) for g in parts)
        if key in grads and len(grads[key]) == len(scaled) and all(
            a.shape == b.shape for a, b in zip(grads[key], scaled)
        ):
            grads[key] = tuple(a + b for a, b in zip(grads[key], scaled))
        elif key not in grads:
            grads[key] = scaled
        else:
            raise ParameterError(f"cannot combine gradients for {key!r}: shapes differ")
    grads = {k: (v if len(v) > 1 else v[0]) for k, v in grads.items()}
    return LossBreakdown(components, weighted, total, grads)


def depth_loss(photo, sm, pgs, ped, pgt, w=None):
    """``photo*g_photo + sm*g_sm + pgs*g_pgs + ped*g_ped + pgt*g_pgt``."""
    w = default_weights() if w is None else w
    terms = dict(photo=photo, sm=sm, pgs=pgs, ped=ped, pgt=pgt)
    return _combine(terms, {n: getattr(w, f"gamma_{n}") for n in DEPTH_TERMS})


def total_loss(depth, sem, instance, optical, w=None):
    """``g_depth*L_depth + g_sem*L_sem + g_instance*L_instance + g_optical*L_optical``."""
    w = default_weights() if w is None else w
    terms = dict(depth=depth, sem=sem, instance=instance, optical=optical)
    return _combine(terms, {n: getattr(w, f"gamma_{n}") for n in TOTAL_TERMS})


def semantic_ce(probabilities, labels):
    """Mean ``-log p(true class)`` over non-void pixels.

    ``probabilities`` is ``(n_classes, H, W)`` with per-pixel distributions;
    the gradient is w.r.t. the probabilities.
    """
    probs = as_array(probabilities)
    if probs.ndim != 3 or probs.shape[1:] != labels.shape:
        raise ParameterError("probabilities must be (n_classes, H, W) matching the labels")
    if np.any(probs < 0) or np.max(np.abs(probs.sum(axis=0) - 1.0), initial=0.0) > 1e-5:
        raise ParameterError("probabilities must be non-negative and sum to 1 per pixel")
    valid = ~labels.void
    cls = labels.class_id
    if np.any(cls[valid] >= probs.shape[0]):
        raise ParameterError("label class id exceeds the number of predicted classes")
    n = int(valid.sum())
    grad = np.zeros_like(probs)
    if n == 0:
        return LossResult(0.0, grad, "probabilities")
    rows, cols = np.nonzero(valid)
    p_true = np.maximum(probs[cls[rows, cols], rows, cols], PROB_FLOOR)
    value = float(-np.log(p_true).sum() / n)
    grad[cls[rows, cols], rows, cols] = -1.0 / (p_true * n)
    return LossResult(value, grad, "probabilities")


def instance_loss(center_pred, center_gt, offset_pred, offset_gt, thing_mask=None,
                  w_center=200.0, w_offset=0.01):
    """``w_center * MSE(center) + w_offset * L1(offset)``.

    The offset L1 sums both channels and averages over ``thing_mask`` pixels
    (all pixels when no mask is given); an empty mask contributes 0.
    """
    cp, cg = as_array(center_pred), as_array(center_gt)
    op, og = as_array(offset_pred), as_array(offset_gt)
    if cp.shape != cg.shape:
        raise ParameterError("center heatmaps must share shape")
    if op.shape != og.shape or op.ndim != 3 or op.shape[0] != 2:
        raise ParameterError("offset maps must be (2, H, W) and share shape")
    mask = np.ones(op.shape[1:], bool) if thing_mask is None else np.asarray(
        getattr(thing_mask, "data", thing_mask)).astype(bool)
    mse = float(np.mean((cp - cg) ** 2)) if cp.size else 0.0
    n = int(mask.sum())
    l1 = float(np.abs(op - og)[:, mask].sum() / n) if n else 0.0
    return LossResult(w_center * mse + w_offset * l1)


def optical_loss(I_t, I_prev, flow, mask=None, alpha=DEFAULT_ALPHA):
    """Photometric error between ``I_t`` and ``I_prev`` warped by ``flow``.

    ``flow`` lives on the grid of ``I_t``: pixel ``p`` is compared with
    ``I_prev`` at ``p + flow(p)``. Pixels sampled outside ``I_prev`` and
    pixels outside ``mask`` are ignored.
    """
    flow = as_array(flow)
    warped, valid = warp_image(I_prev, -flow)
    err = photometric_error(I_t, warped, alpha)
    keep = valid > 0
    if mask is not None:
        keep &= np.asarray(getattr(mask, "data", mask)).astype(bool)
    value, _ = masked_mean(err, keep)
    return LossResult(value)
