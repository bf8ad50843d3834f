import shutil
import subprocess
import sys

import numpy as np
import pytest
from plyfile import PlyData

from cli_harness import determinism_report, invoke, write_depth_dirs, write_video_dirs
from pdk.core import DepthMap, PanopticMap, write_depth_png
from pdk.fixtures import export, preset, render
from pdk.metrics import Frame, VideoSequence


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    code, out, _ = invoke(["fixtures", "--preset", "moving_object", "--output", root])
    assert code == 0 and "manifest.txt" in out
    return root


def test_console_script_entry_point():
    exe = shutil.which("pdk")
    cmd = [exe] if exe else [sys.executable, "-m", "pdk.cli"]
    res = subprocess.run(cmd + ["--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "eval-dvpq" in res.stdout


def test_usage_errors_exit_1(tmp_path):
    assert invoke([])[0] == 1
    assert invoke(["eval-depth", "--pred", tmp_path])[0] == 1
    assert invoke(["eval-depth", "--pred", tmp_path, "--gt", tmp_path, "--crop", 5])[0] == 1
    assert invoke(["gradcheck", "--threads", 0])[0] == 1
    assert invoke(["gradcheck", "--trials", 1], env={"PDK_THREADS": "x"})[0] == 1


def test_eval_depth(tmp_path):
    pred, gt = write_depth_dirs(tmp_path)
    code, out, _ = invoke(["eval-depth", "--pred", pred, "--gt", gt, "--output", tmp_path / "m.csv"])
    assert code == 0 and out.splitlines()[0].split() == ["image", "absRel", "sqRel", "rms"]
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "image,absRel,sqRel,rms,n_pixels,scale"
    assert lines[-1].startswith("mean,") and len(lines) == 6


def test_eval_depth_scaled_prediction(tmp_path):
    (tmp_path / "p").mkdir()
    (tmp_path / "g").mkdir()
    gt = np.random.default_rng(0).uniform(1, 50, (8, 9))
    np.save(tmp_path / "g" / "a.npy", gt)
    np.save(tmp_path / "p" / "a.npy", 1.1 * gt)
    code, out, _ = invoke(["eval-depth", "--pred", tmp_path / "p", "--gt", tmp_path / "g",
                           "--no-median-scale"])
    assert code == 0
    row = [ln for ln in out.splitlines() if ln.startswith("a,")][0].split(",")
    assert float(row[1]) == pytest.approx(0.1, abs=1e-6)
    code, out, _ = invoke(["eval-depth", "--pred", tmp_path / "p", "--gt", tmp_path / "g"])
    row = [ln for ln in out.splitlines() if ln.startswith("a,")][0].split(",")
    assert float(row[1]) == pytest.approx(0.0, abs=1e-6)


def test_eval_depth_data_errors(tmp_path):
    pred, gt = write_depth_dirs(tmp_path)
    assert invoke(["eval-depth", "--pred", pred, "--gt", gt, "--crop", 512, 1664])[0] == 2
    assert invoke(["eval-depth", "--pred", tmp_path / "missing", "--gt", gt])[0] == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert invoke(["eval-depth", "--pred", empty, "--gt", gt])[0] == 2
    (pred / "0000.npy").write_bytes(b"garbage")
    assert invoke(["eval-depth", "--pred", pred, "--gt", gt])[0] == 2


def _perfect_video(n=4):
    frames = []
    for t in range(n):
        cls = np.zeros((6, 8), int)
        cls[:, 4:] = 1
        inst = np.zeros((6, 8), int)
        cls[1:3, t:t + 2] = 2
        inst[1:3, t:t + 2] = 1
        pan = PanopticMap(cls, inst, {2})
        depth = np.full((6, 8), 10.0)
        frames.append(Frame(pan, pan, depth, depth))
    return VideoSequence(frames)


def test_eval_dvpq_perfect(tmp_path):
    pred, gt = write_video_dirs(tmp_path, _perfect_video())
    code, out, _ = invoke(["eval-dvpq", "--pred", pred, "--gt", gt])
    assert code == 0
    csv = out[out.index("k,lambda"):].splitlines()
    assert len(csv) == 13
    assert all(ln.split(",")[2] == "100.000000" for ln in csv[1:])
    assert {ln.split(",")[0] for ln in csv[1:]} == {"1", "2", "3", "4"}
    assert {ln.split(",")[1] for ln in csv[1:]} == {"0.5", "0.25", "0.1"}


def test_eval_dvpq_errors(tmp_path):
    pred, gt = write_video_dirs(tmp_path, _perfect_video(3))
    # cityscapes windows need 4 frames
    assert invoke(["eval-dvpq", "--pred", pred, "--gt", gt])[0] == 2
    assert invoke(["eval-dvpq", "--pred", pred, "--gt", gt, "--ks", 1, 2, 3])[0] == 0
    assert invoke(["eval-dvpq", "--pred", pred, "--gt", gt, "--dataset", "semkitti"])[0] == 2
    (pred / "depth" / "0001.png").unlink()
    assert invoke(["eval-dvpq", "--pred", pred, "--gt", gt, "--ks", 1])[0] == 2


def test_losses_motion_mask_toggle(fixture_dir):
    code, on, _ = invoke(["losses", "--fixture", fixture_dir])
    assert code == 0 and "excluded pixels 320" in on
    code, off, _ = invoke(["losses", "--fixture", fixture_dir, "--no-motion-mask"])
    assert code == 0 and "motion mask: off" in off
    assert on != off


def test_losses_plane_fixture_small_photometric(tmp_path):
    export(render(preset("plane")), tmp_path)
    code, out, _ = invoke(["losses", "--fixture", tmp_path])
    assert code == 0
    photo = [ln for ln in out.splitlines() if ln.strip().startswith("photo:")][0]
    assert float(photo.split()[1]) < 1e-3


def test_losses_weights_and_errors(fixture_dir, tmp_path):
    (tmp_path / "w.txt").write_text("depth=100\n")
    code, out, _ = invoke(["losses", "--fixture", fixture_dir, "--weights", tmp_path / "w.txt"])
    assert code == 0 and "gamma_depth=100.0" in out
    (tmp_path / "bad.txt").write_text("nope=1\n")
    assert invoke(["losses", "--fixture", fixture_dir, "--weights", tmp_path / "bad.txt"])[0] == 2
    assert invoke(["losses", "--fixture", tmp_path])[0] == 2


def test_gradcheck_pass_and_fault():
    code, out, _ = invoke(["gradcheck", "--trials", 1, "--ops", "ssim", "ped"])
    assert code == 0 and out.splitlines()[-1].endswith("all checks passed")
    code, out, _ = invoke(["gradcheck", "--trials", 1, "--ops", "pgs", "--inject-fault", "pgs"])
    assert code == 3 and "FAIL" in out


def test_pointcloud(fixture_dir, tmp_path):
    base = ["pointcloud", "--depth", fixture_dir / "depth_curr.png",
            "--panoptic", fixture_dir / "panoptic_curr.png", "--manifest", fixture_dir / "manifest.txt"]
    code, out, _ = invoke(base + ["--scale", "none", "--output", tmp_path / "c.ply"])
    assert code == 0 and "points: 6144" in out
    data = PlyData.read(str(tmp_path / "c.ply"))["vertex"].data
    assert len(data) == 6144 and np.all(data["z"] > 0)
    code, out, _ = invoke(base + ["--gt-depth", fixture_dir / "depth_curr.png", "--output", tmp_path / "m.ply"])
    assert code == 0 and "scale: 1" in out
    assert invoke(base + ["--output", tmp_path / "x.ply"])[0] == 1  # median needs --gt-depth
    assert invoke(base + ["--scale", "camera-height", "--output", tmp_path / "h.ply"])[0] == 0


def test_pointcloud_camera_height(tmp_path):
    from pdk.core import Intrinsics, write_panoptic_png
    from pdk.fixtures import flat_road_depth

    k = Intrinsics(200, 200, 79.5, 59.5)
    depth = flat_road_depth(k, 120, 160, 1.5) * 0.5
    depth[depth > 100] = 0  # rows near the horizon exceed the PNG range
    write_depth_png(tmp_path / "d.png", DepthMap(np.round(depth * 256) / 256))
    write_panoptic_png(tmp_path / "p.png", PanopticMap(np.where(depth > 0, 0, 10), np.zeros((120, 160), int)))
    code, out, _ = invoke(["pointcloud", "--depth", tmp_path / "d.png", "--panoptic", tmp_path / "p.png",
                           "--intrinsics", 200, 200, 79.5, 59.5, "--scale", "camera-height",
                           "--output", tmp_path / "c.ply"])
    assert code == 0
    scale = float([ln for ln in out.splitlines() if ln.startswith("scale:")][0].split()[1])
    assert scale == pytest.approx(2.0, rel=1e-3)


def test_fixtures_command_bad_preset(tmp_path):
    assert invoke(["fixtures", "--preset", "nope", "--output", tmp_path])[0] == 1


def test_every_command_deterministic(tmp_path):
    report = determinism_report(tmp_path)
    assert set(report) == {"fixtures", "eval-depth", "eval-dvpq", "losses", "gradcheck", "pointcloud"}
    assert all(ok for ok, _ in report.values()), report
