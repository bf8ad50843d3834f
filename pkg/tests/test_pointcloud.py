import numpy as np
import pytest
from plyfile import PlyData

from pdk.core import VOID, DegenerateInputError, FormatError, Intrinsics, PanopticMap, ParameterError
from pdk.fixtures import flat_road_depth
from pdk.geometry import backproject, pixel_grid, project
from pdk.pointcloud import (
    PanopticPointCloud,
    camera_height_scale,
    colorizer,
    median_scale,
    read_ply,
    to_point_cloud,
    write_ply,
)

K = Intrinsics(100, 100, 50, 50)
CAR = 13


def _road_scene(h=120, w=160, camera_height=1.5):
    k = Intrinsics(200, 200, (w - 1) / 2, (h - 1) / 2)
    depth = flat_road_depth(k, h, w, camera_height)
    cls = np.where(depth > 0, 0, 10)
    return depth, PanopticMap(cls, np.zeros((h, w), int), {CAR}), k


def test_backproject_examples():
    depth = np.zeros((101, 101))
    depth[50, 50] = depth[50, 60] = 10.0
    pts = backproject(depth, K)
    assert np.allclose(pts[50, 50], [0, 0, 10])
    assert np.allclose(pts[50, 60], [1, 0, 10])


def test_roundtrip_subpixel():
    depth = np.random.default_rng(0).uniform(0.5, 80, (48, 64))
    k = Intrinsics(721.5, 721.5, 609.6, 172.9)
    assert np.max(np.abs(project(backproject(depth, k), k) - pixel_grid(48, 64))) < 1e-5


def test_point_cloud_counts():
    depth = np.full((4, 5), 3.0)
    depth[0, 0] = 0
    cls = np.zeros((4, 5), int)
    cls[1, 1] = VOID
    cls[2, 2:4] = CAR
    inst = np.where(cls == CAR, 7, 0)
    cloud = to_point_cloud(depth, PanopticMap(cls, inst, {CAR}), K)
    assert len(cloud) == 18
    assert sorted(set(zip(cloud.class_id.tolist(), cloud.instance_id.tolist()))) == [(0, 0), (CAR, 7)]
    with pytest.raises(ParameterError):
        PanopticPointCloud(np.array([[0, 0, -1.0]]), [0], [0])


def test_median_scale():
    rng = np.random.default_rng(1)
    gt = rng.uniform(1, 50, (20, 30))
    gt[rng.random(gt.shape) > 0.1] = 0  # sparse ground truth
    pred = rng.uniform(0.1, 5, gt.shape)
    scaled, s = median_scale(pred, gt)
    valid = gt > 0
    assert np.median(scaled.data[valid]) == pytest.approx(np.median(gt[valid]))
    again, s2 = median_scale(scaled, gt)
    assert s2 == pytest.approx(1.0)
    with pytest.raises(DegenerateInputError):
        median_scale(pred, np.zeros_like(gt))


def test_camera_height_scale():
    depth, pan, k = _road_scene()
    _, s = camera_height_scale(depth, pan, k, 1.5)
    assert abs(s - 1.0) < 1e-3
    _, s = camera_height_scale(depth / 2, pan, k, 1.5)
    assert s == pytest.approx(2.0)
    _, s = camera_height_scale(depth, pan, k, 1.5, stat="mean")
    assert abs(s - 1.0) < 1e-3
    no_road = pan.replace(class_id=np.full(pan.shape, 10))
    with pytest.raises(DegenerateInputError):
        camera_height_scale(depth, no_road, k, 1.5)
    with pytest.raises(ParameterError):
        camera_height_scale(depth, pan, k, 1.5, stat="mode")


def test_ply_roundtrip_two_readers(tmp_path):
    cls = np.array([[0, CAR], [CAR, 5]])
    inst = np.array([[0, 3], [4, 0]])
    cloud = to_point_cloud(np.array([[1.0, 2.0], [3.0, 4.0]]), PanopticMap(cls, inst, {CAR}), K)
    path = tmp_path / "c.ply"
    write_ply(cloud, path)
    ours = read_ply(path)
    theirs = PlyData.read(str(path))["vertex"].data
    for name in ("x", "y", "z", "class_id", "instance_id", "red"):
        assert np.array_equal(ours[name], theirs[name])
    assert np.allclose(np.stack([ours["x"], ours["y"], ours["z"]], 1), cloud.points)
    assert ours["instance_id"].tolist() == [0, 3, 4, 0]
    colour = colorizer(0)
    assert tuple(ours[["red", "green", "blue"]][1]) == colour(CAR, 3)


def test_ply_single_and_empty(tmp_path):
    one = PanopticPointCloud(np.array([[0.5, -0.5, 2.0]]), [CAR], [9])
    write_ply(one, tmp_path / "one.ply")
    data = PlyData.read(str(tmp_path / "one.ply"))["vertex"].data
    assert len(data) == 1 and data["z"][0] == 2.0 and data["instance_id"][0] == 9
    empty = PanopticPointCloud(np.zeros((0, 3)), [], [])
    write_ply(empty, tmp_path / "empty.ply")
    assert len(read_ply(tmp_path / "empty.ply")) == 0
    assert len(PlyData.read(str(tmp_path / "empty.ply"))["vertex"].data) == 0


def test_ply_read_errors(tmp_path):
    (tmp_path / "bad.ply").write_bytes(b"not ply")
    with pytest.raises(FormatError):
        read_ply(tmp_path / "bad.ply")


def test_colorizer_deterministic():
    a, b = colorizer(3), colorizer(3)
    assert a(CAR, 1) == b(CAR, 1)
    assert a(CAR, 1) != a(CAR, 2)
    assert colorizer(4)(CAR, 1) != a(CAR, 1)
    assert all(0 <= c <= 255 for c in a(0, 0))
