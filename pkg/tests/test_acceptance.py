"""One test group per acceptance criterion; verdicts are printed after the run."""

import time

import numpy as np
import pytest

from acceptance_log import record
from cli_harness import determinism_report
from oracles import THING, accumulated_pq, brute_force_pq, lambda_violations, pq_from_oracle, random_pair, random_video
from pdk.aggregate import default_weights, depth_loss, total_loss
from pdk.core import Intrinsics, PanopticMap
from pdk.fixtures import SOURCES, flat_road_depth
from pdk.geometry import backproject, pixel_grid, project, reproject
from pdk.gradcheck import OPS, run_suite
from pdk.metrics import depth_metrics, dvpq, pq_stats, pq, vpq
from pdk.motionmask import ThresholdSchedule, motion_mask, threshold_at
from pdk.photometric import photometric_error, view_synthesis
from pdk.pointcloud import camera_height_scale

N_VIDEOS = 50


# 1 ---------------------------------------------------------------------------------


def test_c1_gradient_suite():
    start = time.perf_counter()
    reports = run_suite(seed=0, trials=100)
    seconds = time.perf_counter() - start
    worst = max(r.worst for r in reports)
    ok = [r.op for r in reports] == list(OPS) and all(r.passed for r in reports) and seconds < 60
    failed = [r.op for r in reports if not r.passed]
    record(1, ok, f"7 ops x 100 trials, worst rel error {worst:.2e}, {seconds:.1f} s"
                  + (f", failing {failed}" if failed else ""))
    assert ok


# 2 ---------------------------------------------------------------------------------


def test_c2_view_synthesis(bundles):
    from pdk.fixtures import photometric_support

    b = bundles("static")
    clean, visible = [], []
    for i, s in enumerate(SOURCES):
        synth, valid = view_synthesis(b.depth, b.images[s], b.poses[i], b.K)
        pe = photometric_error(b.target, synth)
        support = photometric_support(b.spec, s).data.astype(bool) & (valid > 0)
        clean.append(pe[support].mean())
        visible.append(pe[b.visibility[i].data.astype(bool) & (valid > 0)].mean())
    ok = max(clean) < 1e-3
    record(2, ok, f"view synthesis mean error {max(clean):.1e} on occlusion-free support "
                  f"(all visible pixels incl. edge blends: {max(visible):.1e})")
    assert ok


def test_c2_reproject_flow(bundles):
    b = bundles("static")
    err = 0.0
    static = b.static.data.astype(bool)
    for i, flow in enumerate(b.flows):
        coords = reproject(b.depth, b.poses[i], b.K)
        err = max(err, np.abs(coords - pixel_grid(*static.shape) - flow.data)[static].max())
    record(2, err < 1e-4, f"reprojection vs gt flow max {err:.1e} px")
    assert err < 1e-4


# 3 ---------------------------------------------------------------------------------


def test_c3_pq_brute_force():
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        pred, gt = random_pair(rng)
        ref = brute_force_pq(pred, gt)
        stats = pq_stats(pred, gt)
        counts = all((stats.per_class[c].tp, stats.per_class[c].fp, stats.per_class[c].fn) == r[:3]
                     for c, r in ref.items())
        if not counts or pq(pred, gt)[:3] != pq_from_oracle(ref, {THING}):
            mismatches += 1
    record(3, mismatches == 0, f"{1000 - mismatches}/1000 random 8x8 pairs exactly equal")
    assert mismatches == 0


# 4 ---------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def videos():
    return [random_video(np.random.default_rng(s)) for s in range(N_VIDEOS)]


def test_c4_identities(videos):
    bad_k1 = sum(vpq(v, 1) != accumulated_pq(v) for v in videos)
    bad_lam = sum(dvpq(v, k, 1e6) != vpq(v, k) for v in videos for k in (1, 2, 3, 4))
    ok = bad_k1 == 0 and bad_lam == 0
    record(4, ok, f"vpq(k=1) == accumulated pq on {N_VIDEOS - bad_k1}/{N_VIDEOS}, "
                  f"dvpq(lambda=1e6) == vpq on {4 * N_VIDEOS - bad_lam}/{4 * N_VIDEOS} (video, k)")
    assert ok


@pytest.mark.xfail(strict=True, reason="voiding depth-inaccurate pixels can shrink a stuff "
                   "segment's union and raise its IoU; see test_metrics counterexample")
def test_c4_lambda_monotone(videos):
    bad = [(s, lambda_violations(v)) for s, v in enumerate(videos)]
    bad = [(s, v) for s, v in bad if v]
    detail = ", ".join(f"seed {s} k={[k for k, _ in v]}" for s, v in bad)
    record(4, not bad, f"lambda-monotone on {N_VIDEOS - len(bad)}/{N_VIDEOS} videos"
                       + (f" (violations: {detail})" if bad else ""))
    assert not bad


# 5 ---------------------------------------------------------------------------------


def test_c5_moving_object(bundles):
    b = bundles("moving_object")
    T = threshold_at(ThresholdSchedule(), 0)
    mover = ~b.static.data.astype(bool)
    mover_id = int(np.unique(b.panoptic[1].instance_id[mover])[0])
    keep = np.ones(mover.shape, bool)
    mover_iou, static_iou = [], []
    for i, s in enumerate(SOURCES):
        mask, table = motion_mask(b.panoptic[1], b.source_flows[i], b.target, b.images[s],
                                  b.depth, b.poses[i], b.K, T)
        keep &= mask.data.astype(bool)
        for row in table:
            (mover_iou if row.instance_id == mover_id else static_iou).append(row.iou)
    exact = np.array_equal(~keep, mover)
    ok = T == 0.7 and max(mover_iou) < 0.7 and min(static_iou) > 0.9 and exact
    record(5, ok, f"T={T}, mover IoU <= {max(mover_iou):.3f}, static IoU >= {min(static_iou):.3f}, "
                  f"mask zeroes exactly the mover: {exact}")
    assert ok


# 6 ---------------------------------------------------------------------------------


def test_c6_loss_constants():
    w = default_weights()
    published = (50, 1, 1, 10, 1, 0.001, 0.01, 0.0001, 0.1)
    ours = (w.gamma_depth, w.gamma_sem, w.gamma_instance, w.gamma_optical, w.gamma_photo,
            w.gamma_sm, w.gamma_pgs, w.gamma_ped, w.gamma_pgt)
    d = depth_loss(0.1, 2, 1, 10, 0.5).total
    t = total_loss(0.1, 0.5, 0.2, 0.05).total
    ok = ours == published and abs(d - 0.163) < 1e-9 and abs(t - 6.2) < 1e-9
    record(6, ok, f"nine weights exact, depth {d:.12g} vs 0.163, total {t:.12g} vs 6.2")
    assert ok


# 7 ---------------------------------------------------------------------------------


def test_c7_depth_metrics():
    rng = np.random.default_rng(7)
    gt = rng.uniform(1, 80, (40, 50))
    abs_rel = depth_metrics(1.1 * gt, gt, median_scale=False).absRel
    prop = depth_metrics(3.7 * gt, gt).as_row()
    big = np.ones((600, 1800))
    n = depth_metrics(big, big, crop=(512, 1664)).n_pixels
    ok = abs(abs_rel - 0.1) < 1e-9 and max(prop) < 1e-12 and n == 512 * 1664
    record(7, ok, f"absRel {abs_rel:.12f}, proportional {max(prop):.1e}, crop pixels {n}")
    assert ok


# 8 ---------------------------------------------------------------------------------


def test_c8_point_cloud():
    k = Intrinsics(721.5, 721.5, 609.6, 172.9)
    depth = np.random.default_rng(8).uniform(0.5, 80, (64, 96))
    err = np.max(np.abs(project(backproject(depth, k), k) - pixel_grid(64, 96)))
    road_k = Intrinsics(200, 200, 79.5, 59.5)
    road = flat_road_depth(road_k, 120, 160, 1.5)
    pan = PanopticMap(np.where(road > 0, 0, 10), np.zeros(road.shape, int))
    _, scale = camera_height_scale(road, pan, road_k, 1.5)
    ok = err < 1e-5 and abs(scale - 1.0) < 1e-3
    record(8, ok, f"round trip {err:.1e} px, camera-height scale {scale:.6f}")
    assert ok


# 9 ---------------------------------------------------------------------------------


def test_c9_cli_determinism(tmp_path):
    report = determinism_report(tmp_path)
    bad = [name for name, (ok, _) in report.items() if not ok]
    record(9, not bad, f"{len(report) - len(bad)}/{len(report)} commands byte-identical over "
                       "repeat runs, --threads 1/4 and PDK_THREADS=3" + (f", failing {bad}" if bad else ""))
    assert not bad


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
