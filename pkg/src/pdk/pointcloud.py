"""Metric scale recovery and labelled 3-D point clouds with PLY export.

Camera convention: x right, y down, z forward. A point ``h`` meters below the
camera has ``y = +h``.
"""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DegenerateInputError, DepthMap, FormatError, ParameterError, TruncatedFileError, as_array
from .geometry import backproject

ROAD_CLASS = 0
MIN_ROAD_PIXELS = 100

PLY_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("class_id", "u1"), ("instance_id", "<u2"),
])
_PLY_TYPES = {"f4": "float", "u1": "uchar", "u2": "ushort"}


def median_scale(pred, gt):
    """Scale ``pred`` by ``median(gt) / median(pred)`` over pixels valid in both."""
    p, g = as_array(pred), as_array(gt)
    if p.shape != g.shape:
        raise ParameterError("prediction and ground truth must share shape")
    valid = (p > 0) & (g > 0)
    if not valid.any():
        raise DegenerateInputError("no pixel is valid in both depth maps")
    scale = float(np.median(g[valid]) / np.median(p[valid]))
    return DepthMap(p * scale), scale


def camera_height_scale(pred, P, K, known_height, stat="median", road_class=ROAD_CLASS,
                        min_pixels=MIN_ROAD_PIXELS):
    """Scale so the road lies ``known_height`` below the camera.

    The estimated height is the median (or mean) y coordinate of the
    back-projected road pixels; plane tilt is not modelled.
    """
    if stat not in ("median", "mean"):
        raise ParameterError("stat must be 'median' or 'mean'")
    if not known_height > 0:
        raise ParameterError("known_height must be positive")
    depth = as_array(pred)
    if depth.shape != P.shape:
        raise ParameterError("depth and panoptic map must share shape")
    road = (P.class_id == road_class) & (depth > 0)
    if road.sum() < min_pixels:
        raise DegenerateInputError(
            f"need at least {min_pixels} road pixels with valid depth, found {int(road.sum())}"
        )
    heights = backproject(depth, K)[..., 1][road]
    estimate = float(np.median(heights) if stat == "median" else np.mean(heights))
    if not estimate > 0:
        raise DegenerateInputError("road points are not below the camera")
    scale = known_height / estimate
    return DepthMap(depth * scale), scale


@dataclass(frozen=True, eq=False)
class PanopticPointCloud:
    points: np.ndarray  # (N, 3) float32
    class_id: np.ndarray  # (N,)
    instance_id: np.ndarray  # (N,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        cls = np.asarray(self.class_id, dtype=np.int64).ravel()
        inst = np.asarray(self.instance_id, dtype=np.int64).ravel()
        if not (len(pts) == len(cls) == len(inst)):
            raise ParameterError("points and labels must have the same length")
        if len(pts) and not np.all(pts[:, 2] > 0):
            raise ParameterError("all points must have z > 0")
        if len(cls) and (cls.min() < 0 or cls.max() > 254 or inst.min() < 0 or inst.max() > 65535):
            raise ParameterError("labels out of range")
        for name, arr in (("points", pts), ("class_id", cls), ("instance_id", inst)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.points)


def to_point_cloud(depth, P, K):
    """One point per pixel with positive depth and a non-void label."""
    d = as_array(depth)
    if d.shape != P.shape:
        raise ParameterError("depth and panoptic map must share shape")
    keep = (d > 0) & ~P.void
    pts = backproject(d, K)[keep]
    return PanopticPointCloud(pts, P.class_id[keep], P.instance_id[keep])


def colorizer(seed=0):
    """Deterministic ``(class, instance) -> (r, g, b)`` mapping via a hashed hue."""

    def colour(class_id, instance_id):
        digest = hashlib.sha256(f"{seed}:{int(class_id)}:{int(instance_id)}".encode()).digest()
        hue = int.from_bytes(digest[:4], "little") / 2**32
        sat = 0.55 + 0.45 * digest[4] / 255
        val = 0.65 + 0.35 * digest[5] / 255
        return tuple(int(round(c * 255)) for c in colorsys.hsv_to_rgb(hue, sat, val))

    return colour


def _colours(cloud, colour):
    out = np.zeros((len(cloud), 3), dtype=np.uint8)
    if not len(cloud):
        return out
    pairs, inverse = np.unique(
        np.stack([cloud.class_id, cloud.instance_id], axis=1), axis=0, return_inverse=True
    )
    table = np.array([colour(c, i) for c, i in pairs], dtype=np.uint8)
    return table[inverse.ravel()]


def write_ply(cloud, path, colour=None):
    """Binary little-endian PLY with position, colour and panoptic labels."""
    colour = colorizer(0) if colour is None else colour
    data = np.zeros(len(cloud), dtype=PLY_DTYPE)
    if len(cloud):
        data["x"], data["y"], data["z"] = cloud.points.T
        rgb = _colours(cloud, colour)
        data["red"], data["green"], data["blue"] = rgb.T
        data["class_id"] = cloud.class_id
        data["instance_id"] = cloud.instance_id
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(cloud)}"]
    for name in PLY_DTYPE.names:
        header.append(f"property {_PLY_TYPES[PLY_DTYPE[name].str[1:]]} {name}")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path):
    """Read a PLY written by :func:`write_ply` into a structured array."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    count = None
    props = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            props.append((parts[2], parts[1]))
    names = {v: k for k, v in _PLY_TYPES.items()}
    try:
        dtype = np.dtype([(n, ("<" if names[t] != "u1" else "") + names[t]) for n, t in props])
    except KeyError as exc:
        raise FormatError(f"{path}: unsupported property type {exc}") from None
    if count is None:
        raise FormatError(f"{path}: missing vertex element")
    body = raw[end + len(b"end_header\n"):]
    if len(body) < count * dtype.itemsize:
        raise TruncatedFileError(f"{path}: expected {count} vertices")
    return np.frombuffer(body, dtype=dtype, count=count)
