"""Synthetic three-frame scenes with exact geometry.

A scene is a set of textured fronto-parallel rectangles in front of an
infinite background plane, seen by a moving pinhole camera. Every quantity
(image colour, depth, labels, flow, visibility) is computed by casting the
pixel ray against the planes, so it can be evaluated at arbitrary sub-pixel
positions and all outputs agree with each other to floating point precision.

World coordinates coincide with the camera at frame t (index 1). Frames are
ordered ``(t-1, t, t+1)``; sources are ``t-1`` and ``t+1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DepthMap,
    FlowField,
    Image,
    Intrinsics,
    MaskMap,
    PanopticMap,
    ParameterError,
    PoseSE3,
    write_depth_png,
    write_flo,
    write_image,
    write_panoptic_png,
)
from .geometry import pixel_grid

N_FRAMES = 3
TARGET = 1
SOURCES = (0, 2)
N_WAVES = 4
BACKGROUND_CLASS = 0
THING_CLASS = 13
EDGE_TOL = 1e-3  # px


@dataclass(frozen=True, eq=False)
class Rectangle:
    """Axis-aligned rectangle at world depth ``depth``.

    ``extent`` is ``(x0, x1, y0, y1)`` in world meters at frame t;
    ``offsets`` holds the ``(dx, dy)`` world displacement for each frame.
    """

    depth: float
    class_id: int
    instance_id: int
    extent: tuple
    offsets: np.ndarray = None

    def __post_init__(self):
        if not self.depth > 0:
            raise ParameterError("rectangle depth must be positive")
        x0, x1, y0, y1 = (float(v) for v in self.extent)
        if not (x1 > x0 and y1 > y0):
            raise ParameterError("rectangle extent must have positive size")
        object.__setattr__(self, "extent", (x0, x1, y0, y1))
        offsets = np.zeros((N_FRAMES, 2)) if self.offsets is None else np.asarray(self.offsets, float)
        if offsets.shape != (N_FRAMES, 2):
            raise ParameterError("offsets must be one (dx, dy) per frame")
        offsets.setflags(write=False)
        object.__setattr__(self, "offsets", offsets)

    @property
    def moving(self):
        return bool(np.any(self.offsets != self.offsets[TARGET]))


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Everything needed to render a fixture.

    ``poses`` are world-to-camera transforms per frame. ``gt_density`` is the
    fraction of pixels that keep their ground-truth depth (sparse LiDAR-like
    ground truth when below 1).
    """

    height: int
    width: int
    K: Intrinsics
    rectangles: tuple
    background_depth: float
    poses: tuple
    texture_seed: int = 0
    gt_density: float = 1.0
    name: str = "custom"
    seed: int = 0

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ParameterError("resolution must be at least 2x2")
        if len(self.poses) != N_FRAMES:
            raise ParameterError("a scene has exactly 3 frames")
        depths = [r.depth for r in self.rectangles] + [self.background_depth]
        if not all(d > 0 for d in depths):
            raise ParameterError("plane depths must be positive")
        if len(set(depths)) != len(depths):
            raise ParameterError("plane depths must be distinct")
        if not 0 < self.gt_density <= 1:
            raise ParameterError("gt_density must lie in (0, 1]")
        object.__setattr__(self, "rectangles", tuple(self.rectangles))
        object.__setattr__(self, "poses", tuple(self.poses))

    @property
    def thing_classes(self):
        return frozenset(r.class_id for r in self.rectangles if r.instance_id > 0)

    def relative_pose(self, source):
        """Transform from camera t coordinates to camera ``source`` coordinates."""
        return PoseSE3.from_matrix(self.poses[source].matrix @ np.linalg.inv(self.poses[TARGET].matrix))


@dataclass(frozen=True, eq=False)
class FixtureBundle:
    """Rendered frames plus ground truth for the target frame.

    ``flows[i]``, ``poses[i]`` and ``visibility[i]`` refer to source
    ``SOURCES[i]``: flow is ``p' - p`` on the target grid, ``source_flows``
    is the same motion sampled on the source grid, visibility marks
    target pixels whose surface point is the front-most surface at ``p'``
    inside the source image. ``static`` marks target pixels on non-moving
    surfaces.
    """

    spec: SceneSpec
    images: tuple
    depth: DepthMap
    panoptic: tuple
    flows: tuple
    poses: tuple
    visibility: tuple
    static: MaskMap
    source_flows: tuple = ()

    @property
    def K(self):
        return self.spec.K

    @property
    def target(self):
        return self.images[TARGET]

    @property
    def sources(self):
        return tuple(self.images[s] for s in SOURCES)


# -- textures -------------------------------------------------------------------


def _plane_textures(spec):
    """Per plane: (freqs (N,2) cycles/m, phases (3,N), amplitude)."""
    rng = np.random.default_rng(spec.texture_seed)
    planes = list(spec.rectangles) + [None]
    out = []
    for rect in planes:
        depth = spec.background_depth if rect is None else rect.depth
        period_px = rng.uniform(20.0, 40.0, N_WAVES)
        angle = rng.uniform(0, np.pi, N_WAVES)
        cycles_per_m = spec.K.fx / (depth * period_px)
        freqs = cycles_per_m[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
        phases = rng.uniform(0, 2 * np.pi, (3, N_WAVES))
        out.append((freqs, phases))
    return out


def _texture(freqs, phases, xy):
    arg = 2 * np.pi * (xy @ freqs.T)  # (..., N)
    waves = np.sin(arg[None] + phases[:, None, :].reshape((3,) + (1,) * (xy.ndim - 1) + (N_WAVES,)))
    return 0.5 + 0.1 * waves.sum(axis=-1)


# -- ray casting ----------------------------------------------------------------


def _cast(spec, frame, coords):
    """Front-most plane hit by the rays through ``coords`` in ``frame``.

    Returns ``(plane, depth, local)``: plane index (``len(rectangles)`` is the
    background), camera depth, and plane-local world ``(x, y)``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    pose = spec.poses[frame]
    rot_t = pose.rotation.T
    center = -rot_t @ pose.translation
    homog = np.concatenate([coords, np.ones(coords.shape[:-1] + (1,))], axis=-1)
    rays_cam = homog @ spec.K.inverse.T  # z component is 1
    rays = rays_cam @ rot_t.T
    n_rect = len(spec.rectangles)
    best = np.full(coords.shape[:-1], np.inf)
    plane = np.full(coords.shape[:-1], n_rect, dtype=np.intp)
    local = np.zeros(coords.shape[:-1] + (2,))
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (spec.background_depth - center[2]) / rays[..., 2]
    hit = lam > 0
    best = np.where(hit, lam, np.inf)
    local[...] = center[:2] + lam[..., None] * rays[..., :2]
    for i, rect in enumerate(spec.rectangles):
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (rect.depth - center[2]) / rays[..., 2]
        xy = center[:2] + lam[..., None] * rays[..., :2] - rect.offsets[frame]
        x0, x1, y0, y1 = rect.extent
        inside = (lam > 0) & (xy[..., 0] >= x0) & (xy[..., 0] < x1) & (xy[..., 1] >= y0) & (xy[..., 1] < y1)
        closer = inside & (lam < best)
        best = np.where(closer, lam, best)
        plane = np.where(closer, i, plane)
        local = np.where(closer[..., None], xy, local)
    if not np.all(np.isfinite(best)):
        raise ParameterError("some rays miss every plane; check poses and depths")
    # camera depth = ray parameter because the camera-frame ray has unit z
    return plane, best, local


def render_colour(spec, frame, coords, textures=None):
    """Analytic ``(3, ...)`` colour of ``frame`` at sub-pixel ``coords`` (``(..., 2)``)."""
    textures = _plane_textures(spec) if textures is None else textures
    plane, _, local = _cast(spec, frame, coords)
    out = np.zeros((3,) + plane.shape)
    for i, (freqs, phases) in enumerate(textures):
        sel = plane == i
        if sel.any():
            out[:, sel] = _texture(freqs, phases, local[sel])
    return out


def _labels(spec, plane):
    cls = np.full(plane.shape, BACKGROUND_CLASS, dtype=np.int32)
    inst = np.zeros(plane.shape, dtype=np.int32)
    for i, rect in enumerate(spec.rectangles):
        cls[plane == i] = rect.class_id
        inst[plane == i] = rect.instance_id
    return PanopticMap(cls, inst, spec.thing_classes)


def _project_world(spec, frame, xyz):
    cam = xyz @ spec.poses[frame].rotation.T + spec.poses[frame].translation
    q = cam @ spec.K.matrix.T
    return q[..., :2] / q[..., 2:3]


def flow_to(spec, source, coords=None):
    """Exact flow ``p' - p`` from the target grid to ``source``, plus visibility.

    A pixel is visible when its surface point projects inside the source image
    and the front-most surface there is the same plane.
    """
    grid = pixel_grid(spec.height, spec.width) if coords is None else np.asarray(coords, float)
    plane, _, local = _cast(spec, TARGET, grid)
    # plane-local coordinates are fixed on the surface; move them to the source frame
    xy = local.copy()
    z = np.full(plane.shape, spec.background_depth)
    for i, rect in enumerate(spec.rectangles):
        sel = plane == i
        xy[sel] += rect.offsets[source]
        z[sel] = rect.depth
    xyz = np.concatenate([xy, z[..., None]], axis=-1)
    target_pos = _project_world(spec, source, xyz)
    flow = target_pos - grid
    u, v = target_pos[..., 0], target_pos[..., 1]
    visible = (u >= 0) & (u <= spec.width - 1) & (v >= 0) & (v <= spec.height - 1)
    # probe a small neighbourhood so points lying on an edge count as occluded
    for du, dv in ((0, 0), (-EDGE_TOL, 0), (EDGE_TOL, 0), (0, -EDGE_TOL), (0, EDGE_TOL)):
        src_plane, _, _ = _cast(spec, source, target_pos + np.array([du, dv]))
        visible &= src_plane == plane
    return flow, visible


def flow_at_source(spec, source):
    """Exact motion ``q - p`` sampled on the ``source`` grid.

    For every source pixel ``q`` the surface seen there is traced back to its
    position ``p`` in the target frame. This is the flow that backward-warps
    target content into the source frame (``out(q) = P_t(q - flow(q))``).
    """
    grid = pixel_grid(spec.height, spec.width)
    plane, _, local = _cast(spec, source, grid)
    xy = local.copy()
    z = np.full(plane.shape, spec.background_depth)
    for i, rect in enumerate(spec.rectangles):
        sel = plane == i
        xy[sel] += rect.offsets[TARGET]
        z[sel] = rect.depth
    pos = _project_world(spec, TARGET, np.concatenate([xy, z[..., None]], axis=-1))
    return grid - pos


def photometric_support(spec, source):
    """Target pixels whose windowed photometric error sees only visible surface.

    A pixel qualifies when every pixel of its 3x3 window is visible in
    ``source`` and all four bilinear taps around its source position lie on
    the same plane, so interpolation never blends across an occlusion edge.
    """
    grid = pixel_grid(spec.height, spec.width)
    flow, visible = flow_to(spec, source)
    plane, _, _ = _cast(spec, TARGET, grid)
    src_plane, _, _ = _cast(spec, source, grid)
    pos = grid + flow
    x0 = np.clip(np.floor(pos[..., 0]).astype(np.intp), 0, spec.width - 2)
    y0 = np.clip(np.floor(pos[..., 1]).astype(np.intp), 0, spec.height - 2)
    clean = visible.copy()
    for dy in (0, 1):
        for dx in (0, 1):
            clean &= src_plane[y0 + dy, x0 + dx] == plane
    padded = np.pad(clean, 1, mode="edge")
    out = np.ones_like(clean)
    for dy in range(3):
        for dx in range(3):
            out &= padded[dy : dy + spec.height, dx : dx + spec.width]
    return MaskMap(out)


def render(spec):
    """Render a :class:`FixtureBundle` for ``spec``."""
    textures = _plane_textures(spec)
    grid = pixel_grid(spec.height, spec.width)
    images, panoptic = [], []
    for frame in range(N_FRAMES):
        plane, depth, _ = _cast(spec, frame, grid)
        images.append(Image(render_colour(spec, frame, grid, textures)))
        panoptic.append(_labels(spec, plane))
        if frame == TARGET:
            target_plane, target_depth = plane, depth
    if spec.gt_density < 1:
        rng = np.random.default_rng(spec.seed + 7919)
        keep = rng.random(target_depth.shape) < spec.gt_density
        target_depth = np.where(keep, target_depth, 0.0)
    flows, poses, visibility = [], [], []
    for s in SOURCES:
        flow, visible = flow_to(spec, s)
        flows.append(FlowField(flow))
        poses.append(spec.relative_pose(s))
        visibility.append(MaskMap(visible))
    moving = np.zeros(target_plane.shape, dtype=bool)
    for i, rect in enumerate(spec.rectangles):
        if rect.moving:
            moving |= target_plane == i
    return FixtureBundle(
        spec, tuple(images), DepthMap(target_depth), tuple(panoptic),
        tuple(flows), tuple(poses), tuple(visibility), MaskMap(~moving),
        tuple(FlowField(flow_at_source(spec, s)) for s in SOURCES),
    )


# -- presets --------------------------------------------------------------------

PRESETS = ("static", "moving_object", "occlusion", "sparse_gt", "plane")
HEIGHT, WIDTH = 64, 96
FOCAL = 80.0
EGO_STEP = 0.5
BACKGROUND_DEPTH = 25.0


def _translation_pose(x=0.0, y=0.0, z=0.0):
    """World-to-camera pose of a camera centred at ``(x, y, z)`` looking down +z."""
    return PoseSE3(np.eye(3), -np.array([x, y, z], dtype=float))


def _pixel_rect(depth, K, u0, u1, v0, v1):
    """World extent at ``depth`` covering pixel columns ``u0..u1-1`` and rows ``v0..v1-1``.

    Edges sit half-way between pixel centres so no target pixel lies on one.
    """
    return (
        (u0 - 0.5 - K.cx) * depth / K.fx,
        (u1 - 0.5 - K.cx) * depth / K.fx,
        (v0 - 0.5 - K.cy) * depth / K.fy,
        (v1 - 0.5 - K.cy) * depth / K.fy,
    )


def preset(name, seed=0):
    """Deterministic scene for each acceptance scenario.

    * ``static``: 64x96, two car rectangles over a background plane (three
      planes), camera moving forward 0.5 m per frame.
    * ``moving_object``: ``static`` plus a third car translating sideways by
      25% of its width per frame.
    * ``occlusion``: a near car partially covering a far one, camera moving
      sideways so parts of the far car are disoccluded.
    * ``sparse_gt``: ``static`` with ground-truth depth kept on 10% of pixels.
    * ``plane``: ``static`` without the cars, a single textured plane with no
      depth discontinuities (photometric oracle at pyramid resolutions).
    """
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    K = Intrinsics(FOCAL, FOCAL, (WIDTH - 1) / 2, (HEIGHT - 1) / 2)
    forward = tuple(_translation_pose(z=EGO_STEP * (k - TARGET)) for k in range(N_FRAMES))
    rects = [
        Rectangle(14.0, THING_CLASS, 1, _pixel_rect(14.0, K, 4, 40, 4, 40)),
        Rectangle(18.0, THING_CLASS, 2, _pixel_rect(18.0, K, 54, 92, 6, 40)),
    ]
    kwargs = dict(texture_seed=seed, seed=seed, name=name)
    if name == "static":
        return SceneSpec(HEIGHT, WIDTH, K, tuple(rects), BACKGROUND_DEPTH, forward, **kwargs)
    if name == "plane":
        return SceneSpec(HEIGHT, WIDTH, K, (), BACKGROUND_DEPTH, forward, **kwargs)
    if name == "sparse_gt":
        return SceneSpec(HEIGHT, WIDTH, K, tuple(rects), BACKGROUND_DEPTH, forward, gt_density=0.1, **kwargs)
    if name == "moving_object":
        extent = _pixel_rect(16.0, K, 38, 58, 44, 60)
        step = 0.25 * (extent[1] - extent[0])
        offsets = np.array([[-step, 0.0], [0.0, 0.0], [step, 0.0]])
        mover = Rectangle(16.0, THING_CLASS, 3, extent, offsets)
        return SceneSpec(HEIGHT, WIDTH, K, tuple(rects) + (mover,), BACKGROUND_DEPTH, forward, **kwargs)
    # occlusion
    sideways = tuple(_translation_pose(x=0.25 * (k - TARGET)) for k in range(N_FRAMES))
    rects = [
        Rectangle(3.0, THING_CLASS, 1, _pixel_rect(3.0, K, 30, 52, 20, 46)),
        Rectangle(6.0, THING_CLASS, 2, _pixel_rect(6.0, K, 40, 76, 14, 40)),
    ]
    return SceneSpec(HEIGHT, WIDTH, K, tuple(rects), BACKGROUND_DEPTH, sideways, **kwargs)


# -- export ---------------------------------------------------------------------

FRAME_NAMES = ("prev", "curr", "next")


def _fmt(x):
    return repr(float(x))


def manifest_lines(bundle):
    spec = bundle.spec
    K = spec.K
    lines = [
        f"preset={spec.name}",
        f"seed={spec.seed}",
        f"height={spec.height}",
        f"width={spec.width}",
        f"intrinsics={_fmt(K.fx)} {_fmt(K.fy)} {_fmt(K.cx)} {_fmt(K.cy)}",
        f"thing_classes={' '.join(str(c) for c in sorted(spec.thing_classes))}",
    ]
    for s, pose in zip(SOURCES, bundle.poses):
        values = " ".join(_fmt(v) for v in pose.matrix[:3].ravel())
        lines.append(f"pose_curr_to_{FRAME_NAMES[s]}={values}")
    return lines


def export(bundle, directory):
    """Write a bundle in the core file formats plus ``manifest.txt``.

    Files: ``image_{prev,curr,next}.png`` (16-bit RGB),
    ``panoptic_{prev,curr,next}.png``, ``depth_curr.png``,
    ``flow_curr_to_{prev,next}.flo`` and ``manifest.txt``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name, image, pan in zip(FRAME_NAMES, bundle.images, bundle.panoptic):
        write_image(directory / f"image_{name}.png", image, bits=16)
        write_panoptic_png(directory / f"panoptic_{name}.png", pan)
        written += [f"image_{name}.png", f"panoptic_{name}.png"]
    write_depth_png(directory / "depth_curr.png", bundle.depth)
    written.append("depth_curr.png")
    for s, flow in zip(SOURCES, bundle.flows):
        fname = f"flow_curr_to_{FRAME_NAMES[s]}.flo"
        write_flo(directory / fname, flow)
        written.append(fname)
    (directory / "manifest.txt").write_text("\n".join(manifest_lines(bundle)) + "\n", encoding="utf-8")
    written.append("manifest.txt")
    return sorted(written)


def read_manifest(path):
    """Parse a ``key=value`` manifest into a dict of strings."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParameterError(f"malformed manifest line: {raw!r}")
        out[key.strip()] = value.strip()
    return out


def flat_road_depth(K, height, width, camera_height):
    """Depth of a level ground plane ``camera_height`` below the camera (0 above the horizon)."""
    grid = pixel_grid(height, width)
    ray_y = (grid[..., 1] - K.cy) / K.fy
    with np.errstate(divide="ignore"):
        depth = np.where(ray_y > 0, camera_height / np.where(ray_y > 0, ray_y, 1.0), 0.0)
    return depth
