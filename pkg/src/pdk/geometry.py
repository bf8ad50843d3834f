"""Pinhole projection, rigid transforms and sampling operators.

Coordinate grids are ``(H, W, 2)`` float64 arrays of ``(u, v)`` positions in
the image being sampled. Pixels that cannot be reprojected carry ``(-1, -1)``.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import distance_transform_edt

from .core import VOID, Intrinsics, ParameterError, PoseSE3, as_array

Z_MIN = 1e-6
INVALID_COORD = -1.0


def pixel_grid(height, width):
    """Identity coordinate grid: ``grid[v, u] == (u, v)``."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def _check_intrinsics(K):
    if not isinstance(K, Intrinsics):
        raise ParameterError("K must be an Intrinsics instance")
    if abs(np.linalg.det(K.matrix)) < 1e-12:
        raise ParameterError("intrinsic matrix is not invertible")


def reproject_with_jacobian(depth, pose, K):
    """Reprojected coordinates plus their derivative w.r.t. depth.

    Returns ``(coords, valid, dcoords_ddepth)`` where ``valid`` marks pixels
    with positive depth and transformed z above ``Z_MIN``. Both ``coords`` and
    the Jacobian hold ``-1`` / ``0`` on invalid pixels.
    """
    _check_intrinsics(K)
    depth = as_array(depth)
    height, width = depth.shape
    grid = pixel_grid(height, width)
    homog = np.concatenate([grid, np.ones((height, width, 1))], axis=-1)
    # q = D * a + b with a = K R K^-1 p~ and b = K t
    a = homog @ (K.matrix @ pose.rotation @ K.inverse).T
    b = K.matrix @ pose.translation
    q = depth[..., None] * a + b
    z = q[..., 2]
    valid = (depth > 0) & (z > Z_MIN)
    zs = np.where(valid, z, 1.0)
    coords = q[..., :2] / zs[..., None]
    jac = (a[..., :2] * zs[..., None] - q[..., :2] * a[..., 2:3]) / (zs**2)[..., None]
    coords[~valid] = INVALID_COORD
    jac[~valid] = 0.0
    return coords, valid, jac


def reproject(depth, pose, K):
    """Source-frame pixel coordinates of every target pixel."""
    coords, _, _ = reproject_with_jacobian(depth, pose, K)
    return coords


def backproject(depth, K):
    """Camera-frame 3-D points ``D(p) K^-1 p~`` as an ``(H, W, 3)`` array."""
    _check_intrinsics(K)
    depth = as_array(depth)
    grid = pixel_grid(*depth.shape)
    homog = np.concatenate([grid, np.ones(depth.shape + (1,))], axis=-1)
    return depth[..., None] * (homog @ K.inverse.T)


def project(points, K):
    """Pinhole projection of ``(..., 3)`` camera-frame points to ``(..., 2)`` pixels."""
    points = np.asarray(points, dtype=np.float64)
    q = points @ K.matrix.T
    return q[..., :2] / q[..., 2:3]


def _bilinear_setup(size, coord):
    if size == 1:
        lo = np.zeros(coord.shape, dtype=np.intp)
        return lo, lo, np.zeros_like(coord)
    lo = np.clip(np.floor(coord), 0, size - 2).astype(np.intp)
    return lo, lo + 1, coord - lo


def _sampling_setup(shape, coords):
    height, width = shape
    coords = np.asarray(coords, dtype=np.float64)
    u, v = coords[..., 0], coords[..., 1]
    inside = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uc = np.where(inside, u, 0.0)
    vc = np.where(inside, v, 0.0)
    x0, x1, wx = _bilinear_setup(width, uc)
    y0, y1, wy = _bilinear_setup(height, vc)
    return inside, x0, x1, wx, y0, y1, wy


def bilinear_sample(src, coords):
    """Sample ``src`` (``(C,H,W)``) at ``coords`` with bilinear weights.

    Returns ``(output, mask)``. A pixel is valid when its coordinate lies in
    ``[0, W-1] x [0, H-1]`` so all four taps exist; invalid outputs are 0.
    """
    src = as_array(src)
    if src.ndim == 2:
        src = src[None]
    inside, x0, x1, wx, y0, y1, wy = _sampling_setup(src.shape[1:], coords)
    out = (
        src[:, y0, x0] * ((1 - wx) * (1 - wy))
        + src[:, y0, x1] * (wx * (1 - wy))
        + src[:, y1, x0] * ((1 - wx) * wy)
        + src[:, y1, x1] * (wx * wy)
    )
    out = np.where(inside, out, 0.0)
    return out, inside.astype(np.uint8)


def bilinear_sample_grad(src, coords, grad_output):
    """Vector-Jacobian product of :func:`bilinear_sample` w.r.t. ``coords``.

    ``grad_output`` has the output's ``(C, H', W')`` shape; the result is the
    ``(H', W', 2)`` gradient. Masked pixels receive zero gradient.
    """
    src = as_array(src)
    if src.ndim == 2:
        src = src[None]
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.ndim == 2:
        grad_output = grad_output[None]
    inside, x0, x1, wx, y0, y1, wy = _sampling_setup(src.shape[1:], coords)
    d_du = (1 - wy) * (src[:, y0, x1] - src[:, y0, x0]) + wy * (src[:, y1, x1] - src[:, y1, x0])
    d_dv = (1 - wx) * (src[:, y1, x0] - src[:, y0, x0]) + wx * (src[:, y1, x1] - src[:, y0, x1])
    if src.shape[2] == 1:
        d_du = np.zeros_like(d_du)
    if src.shape[1] == 1:
        d_dv = np.zeros_like(d_dv)
    grad = np.stack([(grad_output * d_du).sum(0), (grad_output * d_dv).sum(0)], axis=-1)
    grad[~inside] = 0.0
    return grad


def bilinear_sample_src_grad(src_shape, coords, grad_output):
    """Vector-Jacobian product of :func:`bilinear_sample` w.r.t. the sampled image."""
    channels = src_shape[0] if len(src_shape) == 3 else 1
    height, width = src_shape[-2:]
    grad_output = np.asarray(grad_output, dtype=np.float64).reshape(channels, *np.shape(coords)[:2])
    inside, x0, x1, wx, y0, y1, wy = _sampling_setup((height, width), coords)
    grad = np.zeros((channels, height * width))
    for yy, xx, w in (
        (y0, x0, (1 - wx) * (1 - wy)),
        (y0, x1, wx * (1 - wy)),
        (y1, x0, (1 - wx) * wy),
        (y1, x1, wx * wy),
    ):
        flat = (yy * width + xx)[inside]
        for c in range(channels):
            np.add.at(grad[c], flat, (grad_output[c] * w)[inside])
    return grad.reshape(channels, height, width)


def nearest_indices(shape, coords):
    """Half-up rounded integer taps and an in-bounds flag."""
    height, width = shape
    coords = np.asarray(coords, dtype=np.float64)
    col = np.floor(coords[..., 0] + 0.5)
    row = np.floor(coords[..., 1] + 0.5)
    inside = (col >= 0) & (col <= width - 1) & (row >= 0) & (row <= height - 1)
    col = np.where(inside, col, 0).astype(np.intp)
    row = np.where(inside, row, 0).astype(np.intp)
    return row, col, inside


def nearest_sample(src, coords):
    """Nearest-neighbour lookup of panoptic labels; out-of-bounds becomes void."""
    row, col, inside = nearest_indices(src.shape, coords)
    cls = np.where(inside, src.class_id[row, col], VOID)
    inst = np.where(inside, src.instance_id[row, col], 0)
    return src.replace(cls, inst)


def _flow_coords(flow, shape):
    flow = as_array(flow)
    if flow.shape[:2] != tuple(shape):
        raise ParameterError(f"flow shape {flow.shape[:2]} does not match {tuple(shape)}")
    return pixel_grid(*shape) - flow


def warp_with_flow(src, flow):
    """Backward warp of a panoptic map: ``out(p) = src(p - flow(p))``."""
    return nearest_sample(src, _flow_coords(flow, src.shape))


def warp_image(src, flow):
    """Backward bilinear warp of an image; returns ``(warped, mask)``."""
    src = as_array(src)
    if src.ndim == 2:
        src = src[None]
    return bilinear_sample(src, _flow_coords(flow, src.shape[1:]))


def compose_pose(a, b):
    """Pose of applying ``b`` first, then ``a``."""
    return PoseSE3.from_matrix(a.matrix @ b.matrix)


def invert_pose(a):
    rot_t = a.rotation.T
    return PoseSE3(rot_t, -rot_t @ a.translation)


def rotation_from_euler(rx, ry, rz):
    """Rotation matrix ``Rz @ Ry @ Rx`` for angles in radians."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


# -- resizing -----------------------------------------------------------------


def resize_matrix(n_in, n_out):
    """1-D linear interpolation operator (pixel-center aligned, edge clamped).

    ``resize_matrix(n_in, n_out) @ x`` resamples a length ``n_in`` signal to
    ``n_out`` samples; its transpose is the adjoint used for gradients.
    """
    mat = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def resize_bilinear(x, out_shape):
    x = np.asarray(x, dtype=np.float64)
    rows = resize_matrix(x.shape[-2], out_shape[0])
    cols = resize_matrix(x.shape[-1], out_shape[1])
    return rows @ x @ cols.T


def resize_bilinear_adjoint(g, in_shape):
    g = np.asarray(g, dtype=np.float64)
    rows = resize_matrix(in_shape[0], g.shape[-2])
    cols = resize_matrix(in_shape[1], g.shape[-1])
    return rows.T @ g @ cols


def downsample_mean(x, factor):
    """Block average by an integer ``factor``; ragged borders are edge-padded."""
    x = np.asarray(x, dtype=np.float64)
    if factor == 1:
        return x.copy()
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    channels, height, width = x.shape
    out_h, out_w = -(-height // factor), -(-width // factor)
    padded = np.pad(
        x, ((0, 0), (0, out_h * factor - height), (0, out_w * factor - width)), mode="edge"
    )
    out = padded.reshape(channels, out_h, factor, out_w, factor).mean(axis=(2, 4))
    return out[0] if squeeze else out


def downsample_nearest(pan, out_shape):
    """Nearest (pixel-center) subsampling of a panoptic map."""
    height, width = pan.shape
    rows = np.minimum(((np.arange(out_shape[0]) + 0.5) * height / out_shape[0]).astype(np.intp), height - 1)
    cols = np.minimum(((np.arange(out_shape[1]) + 0.5) * width / out_shape[1]).astype(np.intp), width - 1)
    return pan.replace(pan.class_id[np.ix_(rows, cols)], pan.instance_id[np.ix_(rows, cols)])


def invert_flow(flow, depth=None):
    """Source-grid flow from a target-grid forward flow.

    Every target pixel ``p`` is splatted to ``q = round(p + flow(p))``; the
    result holds ``q - p`` so that ``warp_with_flow`` pulls target labels into
    the source frame. Collisions keep the nearest pixel (smallest ``depth``,
    else the first in raster order). Holes take the value of the nearest
    splatted pixel. Returns ``(inverse, hit)``.
    """
    flow = as_array(flow)
    height, width = flow.shape[:2]
    grid = pixel_grid(height, width)
    row, col, inside = nearest_indices((height, width), grid + flow)
    order = np.arange(height * width)
    if depth is not None:
        depth = as_array(depth)
        if depth.shape != (height, width):
            raise ParameterError("depth and flow must share spatial shape")
        order = np.argsort(depth.ravel(), kind="stable")
    order = order[inside.ravel()[order]]
    dest = row.ravel()[order] * width + col.ravel()[order]
    cells, first = np.unique(dest, return_index=True)
    owner = np.full(height * width, -1, dtype=np.intp)
    owner[cells] = order[first]
    hit = owner >= 0
    inverse = np.zeros((height * width, 2))
    if not hit.any():
        return inverse.reshape(height, width, 2), hit.reshape(height, width)
    src = grid.reshape(-1, 2)
    inverse[hit] = src[hit] - src[owner[hit]]
    if not hit.all():
        _, (rr, cc) = distance_transform_edt(~hit.reshape(height, width), return_indices=True)
        inverse = inverse.reshape(height, width, 2)[rr, cc]
    return inverse.reshape(height, width, 2), hit.reshape(height, width)
