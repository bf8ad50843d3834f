"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure.
Every command writes deterministic output; ``--threads`` (or ``PDK_THREADS``)
only caps how many work items run concurrently.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import aggregate, fixtures, gradcheck, metrics, pointcloud
from .core import (
    DepthMap,
    Intrinsics,
    PanopticMap,
    PdkError,
    PoseSE3,
    read_depth_png,
    read_flo,
    read_image,
    read_panoptic_png,
)
from .geometry import downsample_mean, invert_flow
from .motionmask import DEFAULT_OCCLUSION_R, ThresholdSchedule, motion_mask, threshold_at
from .panoptic_losses import ped, pgs, pgt, smoothness
from .photometric import ScalePyramid, depth_to_disp, multiscale_photometric

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
DEPTH_SUFFIXES = (".png", ".npy")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _threads(args):
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get("PDK_THREADS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"PDK_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def _map(func, items, threads):
    """Ordered map; results never depend on the thread count."""
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def _emit(text, output):
    """Write ``text`` to ``output`` (UTF-8, LF) or stdout."""
    if output is None:
        sys.stdout.write(text)
    else:
        Path(output).write_text(text, encoding="utf-8", newline="\n")


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def _read_depth(path):
    path = Path(path)
    if path.suffix == ".npy":
        return DepthMap(np.load(path))
    return read_depth_png(path)


# -- eval-depth -------------------------------------------------------------------


def _depth_files(directory):
    directory = _require(directory, "directory")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix in DEPTH_SUFFIXES}


def cmd_eval_depth(args):
    pred, gt = _depth_files(args.pred), _depth_files(args.gt)
    stems = sorted(set(pred) & set(gt))
    for stem in sorted(set(pred) ^ set(gt)):
        side = "prediction" if stem in pred else "ground truth"
        print(f"skipped {stem}: no matching file for {side}", file=sys.stderr)
    if not stems:
        print("error: no paired depth files", file=sys.stderr)
        return EXIT_DATA

    def one(stem):
        return metrics.depth_metrics(
            _read_depth(pred[stem]), _read_depth(gt[stem]), args.median_scale, args.crop
        )

    rows = _map(one, stems, _threads(args))
    mean = metrics.mean_depth_metrics(rows)
    csv = ["image,absRel,sqRel,rms,n_pixels,scale"]
    for stem, m in list(zip(stems, rows)) + [("mean", mean)]:
        csv.append(f"{stem},{m.absRel:.6f},{m.sqRel:.6f},{m.rms:.6f},{m.n_pixels},{m.scale:.6f}")
    if args.output:
        _emit("\n".join(csv) + "\n", args.output)
    width = max(len(s) for s in stems + ["image"])
    print(f"{'image'.ljust(width)}  {'absRel':>8}  {'sqRel':>8}  {'rms':>8}")
    for stem, m in list(zip(stems, rows)) + [("mean", mean)]:
        print(f"{stem.ljust(width)}  {m.absRel:8.4f}  {m.sqRel:8.4f}  {m.rms:8.4f}")
    if not args.output:
        print()
        sys.stdout.write("\n".join(csv) + "\n")
    return EXIT_OK


# -- eval-dvpq --------------------------------------------------------------------


def _sequence_files(root, kind):
    sub = _require(Path(root) / kind, f"{kind} directory")
    return {p.stem: p for p in sorted(sub.iterdir()) if p.suffix in ((".png",) if kind == "panoptic" else DEPTH_SUFFIXES)}


def _load_sequence(pred_root, gt_root, thing_classes):
    files = {(side, kind): _sequence_files(root, kind)
             for side, root in (("pred", pred_root), ("gt", gt_root))
             for kind in ("panoptic", "depth")}
    stems = sorted(files[("gt", "panoptic")])
    for key, found in files.items():
        if sorted(found) != stems:
            raise PdkError(
                f"inconsistent sequence: {key[0]} {key[1]} has {len(found)} frames, "
                f"ground-truth panoptic has {len(stems)}"
            )
    if not stems:
        raise PdkError("empty sequence")
    pans = {side: [read_panoptic_png(files[(side, "panoptic")][s]) for s in stems]
            for side in ("pred", "gt")}
    if thing_classes is None:
        things = set()
        for maps in pans.values():
            for p in maps:
                things |= p.thing_classes
    else:
        things = set(thing_classes)
    frames = []
    for i, s in enumerate(stems):
        pred = PanopticMap(pans["pred"][i].class_id, pans["pred"][i].instance_id, things)
        gt = PanopticMap(pans["gt"][i].class_id, pans["gt"][i].instance_id, things)
        frames.append(metrics.Frame(pred, gt, _read_depth(files[("pred", "depth")][s]),
                                    _read_depth(files[("gt", "depth")][s])))
    return metrics.VideoSequence(frames)


def cmd_eval_dvpq(args):
    seq = _load_sequence(args.pred, args.gt, args.thing_classes)
    ks = tuple(args.ks) if args.ks else metrics.DATASET_KS[args.dataset]
    lambdas = tuple(args.lambdas)
    if any(k > len(seq) for k in ks):
        raise PdkError(f"window sizes {ks} need at least {max(ks)} frames, got {len(seq)}")
    voided = {lam: metrics.depth_voided_keys(seq, lam) for lam in lambdas}
    cells = [(k, lam) for lam in lambdas for k in ks]
    values = _map(lambda c: metrics.vpq_stats(seq, c[0], voided[c[1]]).result(), cells,
                  _threads(args))
    table = metrics.DvpqTable(ks, lambdas, dict(zip(cells, values)))
    if args.output:
        _emit(table.to_csv(), args.output)
    sys.stdout.write(table.to_text())
    if not args.output:
        sys.stdout.write("\n" + table.to_csv())
    return EXIT_OK


# -- losses -----------------------------------------------------------------------


def _pose_from_values(text):
    values = np.array([float(v) for v in text.split()])
    if values.size != 12:
        raise PdkError("pose entries need 12 values (3x4 row-major)")
    return PoseSE3(values.reshape(3, 4)[:, :3], values.reshape(3, 4)[:, 3])


def _intrinsics_from_manifest(manifest):
    return Intrinsics(*(float(v) for v in manifest["intrinsics"].split()))


def _load_fixture(directory):
    root = _require(directory, "fixture directory")
    manifest = fixtures.read_manifest(_require(root / "manifest.txt", "manifest"))
    for key in ("intrinsics", "pose_curr_to_prev", "pose_curr_to_next"):
        if key not in manifest:
            raise PdkError(f"manifest lacks {key}")
    things = [int(c) for c in manifest.get("thing_classes", "").split()]
    data = {"K": _intrinsics_from_manifest(manifest)}
    for name in fixtures.FRAME_NAMES:
        data[f"image_{name}"] = read_image(_require(root / f"image_{name}.png", f"{name} image"))
    data["panoptic"] = read_panoptic_png(_require(root / "panoptic_curr.png", "target panoptic map"),
                                         things)
    data["depth"] = read_depth_png(_require(root / "depth_curr.png", "target depth"))
    for name in ("prev", "next"):
        data[f"pose_{name}"] = _pose_from_values(manifest[f"pose_curr_to_{name}"])
        flow_path = root / f"flow_curr_to_{name}.flo"
        data[f"flow_{name}"] = read_flo(flow_path) if flow_path.exists() else None
    return data


def _load_npy(path, what):
    return np.load(_require(path, what))


def cmd_losses(args):
    fx = _load_fixture(args.fixture)
    weights = aggregate.load_weights(_require(args.weights, "weights file")) if args.weights \
        else aggregate.default_weights()
    target = fx["image_curr"]
    sources = [fx["image_prev"], fx["image_next"]]
    poses = [fx["pose_prev"], fx["pose_next"]]
    K = fx["K"]
    shape = target.data.shape[1:]
    if args.disparity:
        disp = _load_npy(args.disparity, "disparity")
        if disp.shape != shape:
            raise PdkError(f"disparity shape {disp.shape} does not match the images {shape}")
        pyramid = ScalePyramid.from_disparity(disp)
        disp_source = "file"
    else:
        disp = depth_to_disp(fx["depth"].data.astype(np.float64))
        pyramid = ScalePyramid.from_depth(fx["depth"])
        disp_source = "ground-truth depth"

    masked = "off"
    extra = None
    if not args.no_motion_mask:
        flows = [fx["flow_prev"], fx["flow_next"]]
        missing = [n for n, f in zip(("prev", "next"), flows) if f is None]
        if missing:
            raise PdkError(f"motion masking needs flow_curr_to_{missing[0]}.flo "
                           "(pass --no-motion-mask to skip)")
        T = args.threshold if args.threshold is not None else threshold_at(
            ThresholdSchedule(), args.iteration)
        keep = np.ones(shape, dtype=bool)
        for flow, src, pose in zip(flows, sources, poses):
            inverse, _ = invert_flow(flow, fx["depth"])
            mask, _ = motion_mask(fx["panoptic"], inverse, target, src, fx["depth"], pose, K, T,
                                  args.occlusion_r)
            keep &= mask.data > 0
        # a half-resolution pixel survives only if its whole 2x2 block does
        extra = downsample_mean(keep.astype(np.float64), 2) > 1 - 1e-9
        masked = f"on (T={T:g}, excluded pixels {int((~keep).sum())})"

    photo = multiscale_photometric(pyramid, target, sources, poses, K, extra_mask=extra)
    pan = fx["panoptic"]
    sm = smoothness(disp, target)
    pg = pgs(disp, pan)
    pe = ped(disp, pan)
    if args.features:
        feats = _load_npy(args.features, "features")
        tri = pgt(feats, pan).value
        pgt_note = ""
    else:
        tri = 0.0
        pgt_note = " (no features)"
    depth = aggregate.depth_loss(photo, sm, pg, pe, tri, weights)
    optical = 0.0
    optical_note = " (no flow)"
    if fx["flow_prev"] is not None:
        optical = aggregate.optical_loss(target, fx["image_prev"], fx["flow_prev"]).value
        optical_note = ""
    total = aggregate.total_loss(depth, 0.0, 0.0, optical, weights)

    notes = {"pgt": pgt_note, "sem": " (no predictions)", "instance": " (no predictions)",
             "optical": optical_note}
    out = [f"disparity: {disp_source}", f"motion mask: {masked}", "weights:"]
    out += [f"  {line}" for line in weights.to_lines()]
    out.append("depth loss:")
    for name in aggregate.DEPTH_TERMS:
        out.append(f"  {name}: {depth.components[name]:.9g} "
                   f"(weighted {depth.weighted[name]:.9g}){notes.get(name, '')}")
    out.append(f"  L_depth: {depth.total:.9g}")
    out.append("total loss:")
    for name in aggregate.TOTAL_TERMS:
        out.append(f"  {name}: {total.components[name]:.9g} "
                   f"(weighted {total.weighted[name]:.9g}){notes.get(name, '')}")
    out.append(f"  total: {total.total:.9g}")
    _emit("\n".join(out) + "\n", args.output)
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------


def cmd_gradcheck(args):
    ops = tuple(args.ops) if args.ops else gradcheck.OPS
    reports = _map(
        lambda op: gradcheck.run_suite(args.seed, args.trials, (op,), args.inject_fault)[0],
        ops, _threads(args),
    )
    lines = []
    for rep in reports:
        status = "PASS" if rep.passed else "FAIL"
        failed = sum(not r.passed for r in rep.results)
        lines.append(f"{rep.op}: {status} worst_rel_error={rep.worst:.3e} trials={len(rep.results)} "
                     f"failed={failed} checked={rep.checked} skipped={rep.skipped}")
    ok = all(rep.passed for rep in reports)
    lines.append(f"tolerance {gradcheck.RTOL:g}, eps {gradcheck.EPS:g}: "
                 + ("all checks passed" if ok else "FAILED"))
    _emit("\n".join(lines) + "\n", args.output)
    return EXIT_OK if ok else EXIT_CHECK


# -- pointcloud -------------------------------------------------------------------


def cmd_pointcloud(args):
    if args.scale == "median" and not args.gt_depth:
        raise UsageError("--scale median requires --gt-depth")
    if args.intrinsics:
        K = Intrinsics(*args.intrinsics)
    elif args.manifest:
        K = _intrinsics_from_manifest(fixtures.read_manifest(_require(args.manifest, "manifest")))
    else:
        raise UsageError("need --intrinsics or --manifest")
    depth = _read_depth(_require(args.depth, "depth"))
    pan = read_panoptic_png(_require(args.panoptic, "panoptic map"))
    if args.scale == "median":
        depth, scale = pointcloud.median_scale(depth, _read_depth(_require(args.gt_depth, "gt depth")))
    elif args.scale == "camera-height":
        depth, scale = pointcloud.camera_height_scale(depth, pan, K, args.camera_height,
                                                      args.height_stat, args.road_class)
    else:
        scale = 1.0
    cloud = pointcloud.to_point_cloud(depth, pan, K)
    pointcloud.write_ply(cloud, args.output, pointcloud.colorizer(args.colour_seed))
    print(f"points: {len(cloud)}")
    print(f"scale: {scale:.9g} ({args.scale})")
    return EXIT_OK


# -- fixtures ---------------------------------------------------------------------


def cmd_fixtures(args):
    bundle = fixtures.render(fixtures.preset(args.preset, args.seed))
    for name in fixtures.export(bundle, args.output):
        print(name)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on concurrent work items (default: $PDK_THREADS or 1)")
    parser = _Parser(prog="pdk", description="Panoptic depth toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval-depth", parents=[common], help="absRel/sqRel/RMS of depth maps")
    p.add_argument("--pred", required=True, help="directory of predicted depth (.png or .npy)")
    p.add_argument("--gt", required=True, help="directory of ground-truth depth")
    p.add_argument("--median-scale", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"), default=None)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_eval_depth)

    p = sub.add_parser("eval-dvpq", parents=[common], help="DVPQ grid over (k, lambda)")
    p.add_argument("--pred", required=True, help="sequence root with panoptic/ and depth/")
    p.add_argument("--gt", required=True, help="sequence root with panoptic/ and depth/")
    p.add_argument("--dataset", choices=sorted(metrics.DATASET_KS), default="cityscapes")
    p.add_argument("--ks", type=int, nargs="+", help="override the dataset window sizes")
    p.add_argument("--lambdas", type=float, nargs="+", default=list(metrics.DEFAULT_LAMBDAS))
    p.add_argument("--thing-classes", type=int, nargs="+", default=None)
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_eval_dvpq)

    p = sub.add_parser("losses", parents=[common], help="loss breakdown on an exported fixture")
    p.add_argument("--fixture", required=True, help="directory written by 'pdk fixtures'")
    p.add_argument("--weights", help="key=value file overriding the default weights")
    p.add_argument("--disparity", help="full-resolution disparity .npy (default: from gt depth)")
    p.add_argument("--features", help="(C,H,W) depth features .npy for the triplet term")
    p.add_argument("--no-motion-mask", action="store_true")
    p.add_argument("--threshold", type=float, default=None, help="IoU threshold T")
    p.add_argument("--iteration", type=int, default=0, help="training iteration for the T schedule")
    p.add_argument("--occlusion-r", type=float, default=DEFAULT_OCCLUSION_R)
    p.add_argument("--output", help="report path (default: stdout)")
    p.set_defaults(func=cmd_losses)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--ops", nargs="+", choices=gradcheck.OPS)
    p.add_argument("--inject-fault", choices=gradcheck.OPS, default=None, help=argparse.SUPPRESS)
    p.add_argument("--output", help="report path (default: stdout)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pointcloud", parents=[common], help="panoptic point cloud as PLY")
    p.add_argument("--depth", required=True)
    p.add_argument("--panoptic", required=True)
    p.add_argument("--intrinsics", type=float, nargs=4, metavar=("FX", "FY", "CX", "CY"))
    p.add_argument("--manifest", help="read intrinsics from a fixture manifest")
    p.add_argument("--scale", choices=("median", "camera-height", "none"), default="median")
    p.add_argument("--gt-depth")
    p.add_argument("--camera-height", type=float, default=1.5)
    p.add_argument("--height-stat", choices=("median", "mean"), default="median")
    p.add_argument("--road-class", type=int, default=pointcloud.ROAD_CLASS)
    p.add_argument("--colour-seed", type=int, default=0)
    p.add_argument("--output", required=True, help="PLY path")
    p.set_defaults(func=cmd_pointcloud)

    p = sub.add_parser("fixtures", parents=[common], help="write a synthetic fixture directory")
    p.add_argument("--preset", required=True, choices=fixtures.PRESETS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_fixtures)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _threads(args)
        return args.func(args)
    except UsageError as exc:
        print(f"pdk {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PdkError, OSError, ValueError) as exc:
        print(f"pdk {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
