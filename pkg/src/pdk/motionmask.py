"""Moving-object masking from panoptic reconstruction, and instance tracking.

An instance of the target frame is considered static when its mask survives a
round trip: warp the panoptic map to the source frame with optical flow, drop
occluded pixels, then pull it back with the rigid (static-world) reprojection.
Objects that move on their own end up misplaced and get a low IoU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import Image, MaskMap, ParameterError, as_array
from .geometry import nearest_sample, reproject, warp_image, warp_with_flow

DEFAULT_OCCLUSION_R = 0.95
DEFAULT_MATCH_IOU = 0.3


def occlusion_mask(I_s, warped_target, r=DEFAULT_OCCLUSION_R):
    """``1`` where ``exp(-mean_c |I_s - warped|) > r``."""
    if not 0 < r < 1:
        raise ParameterError("occlusion threshold r must lie in (0, 1)")
    a = as_array(I_s)
    b = as_array(warped_target)
    if a.ndim == 2:
        a = a[None]
    if b.ndim == 2:
        b = b[None]
    if a.shape != b.shape:
        raise ParameterError("images must have the same shape")
    return MaskMap(np.exp(-np.abs(a - b).mean(axis=0)) > r)


def reconstruct_panoptic(P_t, flow_ts, I_s, I_warped, depth, pose, K, r=DEFAULT_OCCLUSION_R):
    """Panoptic map of frame t rebuilt through source frame s.

    ``flow_ts`` is the target-to-source flow and ``I_warped`` the target image
    warped into the source frame with it. Occluded source pixels are set to
    void before the rigid pull-back, so they never vote.
    """
    warped = warp_with_flow(P_t, flow_ts)
    mask = occlusion_mask(I_s, I_warped, r)
    if mask.data.shape != warped.shape:
        raise ParameterError("images and panoptic map must share spatial shape")
    masked = warped.with_void(mask.data == 0)
    return nearest_sample(masked, reproject(depth, pose, K))


class IouRow(NamedTuple):
    class_id: int
    instance_id: int
    iou: float
    pixel_count_t: int
    pixel_count_recon: int


@dataclass(frozen=True)
class InstanceIouTable:
    rows: tuple

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def lookup(self, class_id, instance_id):
        for row in self.rows:
            if row.class_id == class_id and row.instance_id == instance_id:
                return row
        raise KeyError((class_id, instance_id))


def _thing_keys(pan):
    things = np.isin(pan.class_id, list(pan.thing_classes)) & (pan.instance_id > 0)
    keys = np.where(things, pan.segment_ids(), -1)
    return keys, np.unique(keys[keys >= 0])


def instance_iou(P_t, P_recon, exclude_void=False):
    """IoU of every thing instance of ``P_t`` with the same id in ``P_recon``.

    Void pixels of ``P_recon`` count as "not this instance" by default, so an
    object that moved away from its rigidly predicted place (leaving a
    disoccluded, void area) is penalized. With ``exclude_void`` they are left
    out of the union instead. An empty union gives IoU 0.
    """
    if P_t.shape != P_recon.shape:
        raise ParameterError("panoptic maps must share shape")
    keys_t, ids = _thing_keys(P_t)
    keys_r = P_recon.segment_ids()
    known = ~P_recon.void if exclude_void else np.ones(P_t.shape, dtype=bool)
    rows = []
    for key in ids:
        a = keys_t == key
        b = keys_r == key
        inter = int(np.count_nonzero(a & b))
        union = int(np.count_nonzero((a | b) & known))
        iou = inter / union if union else 0.0
        cls, inst = divmod(int(key), 65536)
        rows.append(IouRow(cls, inst, iou, int(a.sum()), int(b.sum())))
    return InstanceIouTable(tuple(rows))


def moving_object_mask(table, P_t, T):
    """Zero the pixels of every instance whose IoU is below ``T``."""
    if not 0 <= T <= 1:
        raise ParameterError("threshold T must lie in [0, 1]")
    keep = np.ones(P_t.shape, dtype=bool)
    for row in table:
        if row.iou < T:
            keep &= ~((P_t.class_id == row.class_id) & (P_t.instance_id == row.instance_id))
    return MaskMap(keep)


@dataclass(frozen=True)
class ThresholdSchedule:
    """Linear decay of the IoU threshold from ``T0`` to ``T_final``."""

    T0: float = 0.7
    total_iters: int = 30000
    T_final: float = 0.5

    def __post_init__(self):
        if not 0 <= self.T_final <= self.T0 <= 1:
            raise ParameterError("need 0 <= T_final <= T0 <= 1")
        if self.total_iters < 1:
            raise ParameterError("total_iters must be positive")


def threshold_at(schedule, iteration):
    if iteration < 0:
        raise ParameterError("iteration must be non-negative")
    frac = min(iteration, schedule.total_iters) / schedule.total_iters
    return schedule.T0 + (schedule.T_final - schedule.T0) * frac


def motion_mask(P_t, flow_ts, I_t, I_s, depth, pose, K, T, r=DEFAULT_OCCLUSION_R):
    """Convenience pipeline: reconstruct, score instances, build the mask."""
    warped, _ = warp_image(I_t, flow_ts)
    recon = reconstruct_panoptic(P_t, flow_ts, I_s, Image(np.clip(warped, 0, 1)), depth, pose, K, r)
    table = instance_iou(P_t, recon)
    return moving_object_mask(table, P_t, T), table


# -- instance id propagation -----------------------------------------------------


def propagate_instance_ids(P_prev, flow_prev_to_curr, P_curr, iou_thresh=DEFAULT_MATCH_IOU,
                           running_max=None):
    """Relabel ``P_curr`` instances with the ids of the instances they continue.

    ``P_prev`` is warped along the flow; current instances are greedily
    matched to warped instances of the same class by decreasing IoU (ties by
    id). Each previous id is used at most once. Unmatched instances keep
    their id when it already lies above the running maximum, otherwise they
    get fresh ids above it.
    """
    if not 0 < iou_thresh <= 1:
        raise ParameterError("iou_thresh must lie in (0, 1]")
    if P_prev.shape != P_curr.shape:
        raise ParameterError("panoptic maps must share shape")
    warped = warp_with_flow(P_prev, flow_prev_to_curr)
    top = int(P_prev.instance_id.max(initial=0))
    if running_max is not None:
        top = max(top, int(running_max))

    keys_w, ids_w = _thing_keys(warped)
    keys_c, ids_c = _thing_keys(P_curr)
    candidates = []
    for kc in ids_c:
        cur = keys_c == kc
        cls_c = kc >> 16
        for kw in ids_w:
            if kw >> 16 != cls_c:
                continue
            prev = keys_w == kw
            inter = np.count_nonzero(cur & prev)
            if inter == 0:
                continue
            iou = inter / np.count_nonzero(cur | prev)
            if iou >= iou_thresh:
                candidates.append((-iou, int(kc), int(kw)))
    candidates.sort()
    assigned, used = {}, set()
    for _, kc, kw in candidates:
        if kc in assigned or kw in used:
            continue
        assigned[kc] = kw & 0xFFFF
        used.add(kw)

    taken = set(assigned.values())
    for kc in ids_c:
        kc = int(kc)
        if kc in assigned:
            continue
        own = kc & 0xFFFF
        if own > top and own not in taken:
            assigned[kc] = own
        else:
            fresh = max([top] + list(taken)) + 1
            assigned[kc] = fresh
        taken.add(assigned[kc])

    inst = P_curr.instance_id.copy()
    for kc, new_id in assigned.items():
        inst[keys_c == kc] = new_id
    return P_curr.replace(instance_id=inst)


class InstanceTracker:
    """Stateful wrapper that keeps the running maximum id across frames."""

    def __init__(self, iou_thresh=DEFAULT_MATCH_IOU):
        self.iou_thresh = iou_thresh
        self.running_max = 0
        self.previous = None

    def update(self, P_curr, flow_prev_to_curr=None):
        if self.previous is None:
            out = P_curr
        else:
            if flow_prev_to_curr is None:
                flow_prev_to_curr = np.zeros(P_curr.shape + (2,))
            out = propagate_instance_ids(
                self.previous, flow_prev_to_curr, P_curr, self.iou_thresh, self.running_max
            )
        self.running_max = max(self.running_max, int(out.instance_id.max(initial=0)))
        self.previous = out
        return out
