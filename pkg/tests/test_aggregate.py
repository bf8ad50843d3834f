from dataclasses import asdict

import numpy as np
import pytest

from pdk.core import VOID, LossResult, PanopticMap, ParameterError
from pdk.aggregate import (
    LossWeights,
    default_weights,
    depth_loss,
    instance_loss,
    load_weights,
    optical_loss,
    semantic_ce,
    total_loss,
)

PUBLISHED = dict(gamma_depth=50, gamma_sem=1, gamma_instance=1, gamma_optical=10, gamma_photo=1,
                 gamma_sm=0.001, gamma_pgs=0.01, gamma_ped=0.0001, gamma_pgt=0.1)


def test_default_weights_exact():
    assert asdict(default_weights()) == PUBLISHED
    with pytest.raises(ParameterError):
        LossWeights(gamma_sm=-1)


def test_depth_loss_arithmetic():
    assert depth_loss(0, 0, 0, 0, 0).total == 0.0
    assert depth_loss(1, 0, 0, 0, 0).total == 1.0
    assert abs(depth_loss(0.1, 2, 1, 10, 0.5).total - 0.163) < 1e-9


def test_total_loss_arithmetic():
    assert total_loss(0, 0, 0, 0).total == 0.0
    out = total_loss(0.1, 0.5, 0.2, 0.05)
    assert abs(out.total - 6.2) < 1e-9
    doubled = total_loss(0.1, 0.5, 0.2, 0.05, default_weights().replace(gamma_depth=100))
    assert doubled.weighted["depth"] == 2 * out.weighted["depth"]
    assert all(doubled.weighted[k] == out.weighted[k] for k in ("sem", "instance", "optical"))


def test_nested_breakdown_and_gradients():
    inner = depth_loss(LossResult(0.1, np.ones(3), "disp"), 2, 1, 10, LossResult(0.5, np.ones(3), "disp"))
    assert np.allclose(inner.gradients["disp"], 1.0 + 0.1)
    outer = total_loss(inner, 0, 0, 0)
    assert outer.components["depth"] == inner.total
    with pytest.raises(ParameterError):
        depth_loss(float("nan"), 0, 0, 0, 0)


def test_load_weights(tmp_path):
    path = tmp_path / "w.txt"
    path.write_text("# tuned\ndepth = 25\ngamma_pgt=0.2\n\n", encoding="utf-8")
    w = load_weights(path)
    assert w.gamma_depth == 25 and w.gamma_pgt == 0.2 and w.gamma_sm == 0.001
    path.write_text("bogus=1\n", encoding="utf-8")
    with pytest.raises(ParameterError):
        load_weights(path)
    path.write_text("sm=abc\n", encoding="utf-8")
    with pytest.raises(ParameterError):
        load_weights(path)


def _labels(cls):
    cls = np.asarray(cls)
    return PanopticMap(cls, np.zeros_like(cls))


def test_semantic_ce_examples():
    labels = _labels(np.random.default_rng(0).integers(0, 19, (4, 5)))
    uniform = np.full((19, 4, 5), 1 / 19)
    assert semantic_ce(uniform, labels).value == pytest.approx(np.log(19))
    onehot = np.zeros((19, 4, 5))
    np.put_along_axis(onehot, labels.class_id[None], 1.0, axis=0)
    assert semantic_ce(onehot, labels).value == 0.0
    void = _labels(np.full((4, 5), VOID))
    assert semantic_ce(uniform, void).value == 0.0
    with pytest.raises(ParameterError):
        semantic_ce(uniform * 2, labels)


def test_semantic_ce_gradient():
    rng = np.random.default_rng(1)
    p = rng.random((3, 2, 3)) + 0.1
    p /= p.sum(axis=0)
    labels = _labels(rng.integers(0, 3, (2, 3)))
    grad = semantic_ce(p, labels).gradient
    eps = 1e-6
    for idx in np.ndindex(p.shape):
        # the loss reads only the true-class entry, so perturb it alone
        q1, q2 = p.copy(), p.copy()
        q1[idx] += eps
        q2[idx] -= eps

        def f(q):
            rows, cols = np.indices((2, 3))
            return -np.log(q[labels.class_id, rows, cols]).mean()

        assert grad[idx] == pytest.approx((f(q1) - f(q2)) / (2 * eps), abs=1e-6)


def test_instance_loss_examples():
    c = np.random.default_rng(2).random((4, 4))
    o = np.zeros((2, 4, 4))
    things = np.zeros((4, 4), bool)
    things[1:3, 1:3] = True
    assert instance_loss(c, c, o, o, things).value == 0.0
    assert instance_loss(c + 0.1, c, o, o, things).value == pytest.approx(0.01 * 200)
    off = o.copy()
    off[:, things] += 1
    assert instance_loss(c, c, off, o, things).value == pytest.approx(2 * 0.01)
    with pytest.raises(ParameterError):
        instance_loss(c, c, o[:1], o[:1])


def test_optical_loss():
    rng = np.random.default_rng(3)
    prev = rng.random((3, 6, 8))
    assert optical_loss(prev, prev, np.zeros((6, 8, 2))).value == pytest.approx(0.0, abs=1e-12)
    # I_t(p) = I_prev(p + (1, 0)), so the flow (1, 0) explains it
    cur = np.zeros_like(prev)
    cur[:, :, :-1] = prev[:, :, 1:]
    flow = np.zeros((6, 8, 2))
    flow[..., 0] = 1
    assert optical_loss(cur, prev, flow).value == pytest.approx(0.0, abs=1e-12)
    assert optical_loss(cur, prev, np.zeros((6, 8, 2))).value > 0.05
    assert optical_loss(cur, prev, flow, mask=np.zeros((6, 8))).value == 0.0
