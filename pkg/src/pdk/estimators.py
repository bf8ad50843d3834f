"""scikit-learn style wrappers around the scale-recovery and masking routines.

The domain functions take images and maps rather than ``(n_samples,
n_features)`` tables, so these estimators only borrow the ``fit`` /
``transform`` protocol and parameter handling; ``X`` is a depth map (or a
mapping of named inputs) instead of a feature matrix.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .core import DepthMap, Intrinsics, ParameterError, PoseSE3, as_array
from .motionmask import DEFAULT_OCCLUSION_R, motion_mask
from .pointcloud import ROAD_CLASS, camera_height_scale, median_scale

MOTION_INPUTS = ("panoptic", "flow", "image_t", "image_s", "depth", "pose")


def check_depth(depth, name="depth"):
    """2-D, finite, non-negative depth as float64."""
    arr = as_array(depth)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ParameterError(f"{name} must be finite and non-negative")
    return arr


def check_depth_pair(pred, gt):
    p, g = check_depth(pred, "prediction"), check_depth(gt, "ground truth")
    if p.shape != g.shape:
        raise ParameterError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def check_intrinsics(K):
    """Accept an ``Intrinsics`` or a ``(fx, fy, cx, cy)`` sequence."""
    if isinstance(K, Intrinsics):
        return K
    values = np.asarray(K, dtype=np.float64).ravel()
    if values.shape != (4,):
        raise ParameterError("intrinsics must be (fx, fy, cx, cy)")
    return Intrinsics(*values)


def check_motion_inputs(X):
    missing = [k for k in MOTION_INPUTS if k not in X]
    if missing:
        raise ParameterError(f"missing motion-mask inputs: {', '.join(missing)}")
    if not isinstance(X["pose"], PoseSE3):
        raise ParameterError("pose must be a PoseSE3")
    return X


class MedianScaler(TransformerMixin, BaseEstimator):
    """Learns ``median(gt) / median(pred)`` and multiplies depth maps by it."""

    def fit(self, X, y):
        _, self.scale_ = median_scale(*check_depth_pair(X, y))
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return DepthMap(check_depth(X) * self.scale_)


class CameraHeightScaler(TransformerMixin, BaseEstimator):
    """Scale from a known camera height above the road (``y`` = panoptic map)."""

    def __init__(self, K=None, known_height=1.5, stat="median", road_class=ROAD_CLASS):
        self.K = K
        self.known_height = known_height
        self.stat = stat
        self.road_class = road_class

    def fit(self, X, y):
        if self.K is None:
            raise ParameterError("CameraHeightScaler needs intrinsics K")
        _, self.scale_ = camera_height_scale(
            check_depth(X), y, check_intrinsics(self.K), self.known_height, self.stat,
            self.road_class,
        )
        return self

    def transform(self, X):
        check_is_fitted(self, "scale_")
        return DepthMap(check_depth(X) * self.scale_)


class MovingObjectMasker(TransformerMixin, BaseEstimator):
    """Per-pixel keep mask excluding instances that move on their own.

    ``X`` is a mapping with keys ``panoptic``, ``flow`` (source-grid flow into
    the source frame), ``image_t``, ``image_s``, ``depth`` and ``pose``.
    ``fit`` records the per-instance IoU table of the last input.
    """

    def __init__(self, K=None, T=0.7, r=DEFAULT_OCCLUSION_R):
        self.K = K
        self.T = T
        self.r = r

    def _run(self, X):
        if self.K is None:
            raise ParameterError("MovingObjectMasker needs intrinsics K")
        X = check_motion_inputs(X)
        return motion_mask(
            X["panoptic"], X["flow"], X["image_t"], X["image_s"], X["depth"], X["pose"],
            check_intrinsics(self.K), self.T, self.r,
        )

    def fit(self, X, y=None):
        _, self.table_ = self._run(X)
        return self

    def transform(self, X):
        return self._run(X)[0]
