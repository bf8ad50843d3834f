import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pdk.core import Intrinsics, PanopticMap, ParameterError
from pdk.estimators import (
    CameraHeightScaler,
    MedianScaler,
    MovingObjectMasker,
    check_depth,
    check_intrinsics,
    check_motion_inputs,
)
from pdk.fixtures import flat_road_depth


def test_validation_helpers():
    assert check_depth([[1, 2]]).dtype == np.float64
    with pytest.raises(ParameterError):
        check_depth(np.ones(3))
    with pytest.raises(ParameterError):
        check_depth([[-1.0]])
    assert check_intrinsics((1, 2, 3, 4)) == Intrinsics(1, 2, 3, 4)
    with pytest.raises(ParameterError):
        check_intrinsics((1, 2, 3))
    with pytest.raises(ParameterError):
        check_motion_inputs({"panoptic": None})


def test_median_scaler():
    gt = np.random.default_rng(0).uniform(1, 10, (5, 6))
    est = MedianScaler()
    with pytest.raises(NotFittedError):
        est.transform(gt)
    out = est.fit(gt / 4, gt).transform(gt / 4)
    assert est.scale_ == pytest.approx(4.0)
    assert np.allclose(out.data, gt)
    assert np.allclose(MedianScaler().fit_transform(gt / 4, gt).data, gt)


def test_camera_height_scaler_params_and_fit():
    k = Intrinsics(200, 200, 79.5, 59.5)
    depth = flat_road_depth(k, 120, 160, 1.5)
    pan = PanopticMap(np.where(depth > 0, 0, 10), np.zeros((120, 160), int))
    est = CameraHeightScaler(K=k, known_height=3.0)
    assert est.get_params()["known_height"] == 3.0
    twin = clone(est)
    assert twin.get_params() == est.get_params() and not hasattr(twin, "scale_")
    est.fit(depth, pan)
    assert est.scale_ == pytest.approx(2.0, rel=1e-3)
    with pytest.raises(ParameterError):
        CameraHeightScaler().fit(depth, pan)


def test_moving_object_masker(bundles):
    b = bundles("moving_object")
    X = dict(panoptic=b.panoptic[1], flow=b.source_flows[0], image_t=b.target,
             image_s=b.images[0], depth=b.depth, pose=b.poses[0])
    est = MovingObjectMasker(K=b.K).fit(X)
    assert len(est.table_) == 3
    mask = est.transform(X)
    assert np.array_equal(mask.data == 0, ~b.static.data.astype(bool))
    assert MovingObjectMasker(K=b.K, T=0.0).transform(X).data.all()
    X["pose"] = np.eye(4)
    with pytest.raises(ParameterError):
        est.transform(X)
    assert clone(est).get_params()["T"] == 0.7
