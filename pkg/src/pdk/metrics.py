"""Depth error metrics and (video, depth-aware) panoptic quality.

Panoptic quality follows the COCO panoptic reference semantics: segments of
the same class match when IoU > 0.5, ground-truth void pixels are removed
from the union, and predicted segments covering mostly void are not false
positives. All quality numbers are percentages.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .core import MAX_INSTANCE, DegenerateInputError, ParameterError, as_array

CITYSCAPES_KS = (1, 2, 3, 4)
SEMKITTI_KS = (1, 5, 10, 20)
DEFAULT_LAMBDAS = (0.5, 0.25, 0.1)
DATASET_KS = {"cityscapes": CITYSCAPES_KS, "semkitti": SEMKITTI_KS}
MATCH_IOU = 0.5
SEG_BASE = MAX_INSTANCE + 1


# -- depth ----------------------------------------------------------------------


@dataclass(frozen=True)
class DepthMetrics:
    absRel: float
    sqRel: float
    rms: float
    n_pixels: int = 0
    scale: float = 1.0

    def as_row(self):
        return (self.absRel, self.sqRel, self.rms)


def crop_slices(shape, crop):
    """Slices for ``crop``: ``(h, w)`` centred or ``(top, left, h, w)``."""
    height, width = shape
    if len(crop) == 2:
        h, w = (int(c) for c in crop)
        top, left = (height - h) // 2, (width - w) // 2
    elif len(crop) == 4:
        top, left, h, w = (int(c) for c in crop)
    else:
        raise ParameterError("crop must be (h, w) or (top, left, h, w)")
    if h <= 0 or w <= 0 or top < 0 or left < 0 or top + h > height or left + w > width:
        raise ParameterError(f"crop {tuple(crop)} does not fit a {height}x{width} image")
    return slice(top, top + h), slice(left, left + w)


def depth_metrics(pred, gt, median_scale=True, crop=None):
    """absRel, sqRel and RMS over pixels with positive ground truth."""
    pred = as_array(pred)
    gt = as_array(gt)
    if pred.shape != gt.shape:
        raise ParameterError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if crop is not None:
        rows, cols = crop_slices(gt.shape, crop)
        pred, gt = pred[rows, cols], gt[rows, cols]
    valid = gt > 0
    if not valid.any():
        raise DegenerateInputError("no valid ground-truth pixels")
    p, g = pred[valid], gt[valid]
    scale = 1.0
    if median_scale:
        med = np.median(p)
        if not med > 0:
            raise DegenerateInputError("median prediction is not positive")
        scale = float(np.median(g) / med)
        p = p * scale
    diff = p - g
    return DepthMetrics(
        float(np.mean(np.abs(diff) / g)),
        float(np.mean(diff**2 / g)),
        float(np.sqrt(np.mean(diff**2))),
        int(valid.sum()),
        scale,
    )


def mean_depth_metrics(items):
    items = list(items)
    if not items:
        raise DegenerateInputError("no depth metrics to average")
    return DepthMetrics(
        float(np.mean([m.absRel for m in items])),
        float(np.mean([m.sqRel for m in items])),
        float(np.mean([m.rms for m in items])),
        int(sum(m.n_pixels for m in items)),
        float(np.mean([m.scale for m in items])),
    )


# -- panoptic quality -----------------------------------------------------------


@dataclass
class ClassStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class PqStats:
    """Per-class accumulators; ``thing_classes`` collects every thing class seen."""

    per_class: dict = field(default_factory=dict)
    thing_classes: set = field(default_factory=set)

    def _get(self, cls):
        if cls not in self.per_class:
            self.per_class[cls] = ClassStats()
        return self.per_class[cls]

    def __iadd__(self, other):
        for cls in sorted(other.per_class):
            src, dst = other.per_class[cls], self._get(cls)
            dst.iou_sum += src.iou_sum
            dst.tp += src.tp
            dst.fp += src.fp
            dst.fn += src.fn
        self.thing_classes |= other.thing_classes
        return self

    def class_pq(self, cls):
        s = self.per_class[cls]
        denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
        return s.iou_sum / denom if denom else None

    def result(self):
        """``(PQ, PQ_things, PQ_stuff)`` in percent; empty groups give 0."""
        groups = {"all": [], "things": [], "stuff": []}
        for cls in sorted(self.per_class):
            value = self.class_pq(cls)
            if value is None:
                continue
            groups["all"].append(value)
            groups["things" if cls in self.thing_classes else "stuff"].append(value)
        return tuple(100.0 * float(np.mean(v)) if v else 0.0 for v in groups.values())


def _keys(pan):
    return pan.segment_ids()


def pq_stats_from_keys(pred_keys, gt_keys):
    """Matching statistics for flattened segment-id arrays (``-1`` is void)."""
    pred_keys = np.asarray(pred_keys, dtype=np.int64).ravel()
    gt_keys = np.asarray(gt_keys, dtype=np.int64).ravel()
    if pred_keys.shape != gt_keys.shape:
        raise ParameterError("prediction and ground truth must have the same number of pixels")
    stats = PqStats()
    gt_ids, gt_area = np.unique(gt_keys, return_counts=True)
    pred_ids, pred_area = np.unique(pred_keys, return_counts=True)
    gt_area = dict(zip(gt_ids.tolist(), gt_area.tolist()))
    pred_area = dict(zip(pred_ids.tolist(), pred_area.tolist()))
    # encode (gt, pred) pairs; shift by one so void (-1) stays non-negative
    n = max(pred_area) + 2 if pred_area else 2
    pair = (gt_keys + 1) * n + (pred_keys + 1)
    pair_ids, pair_area = np.unique(pair, return_counts=True)
    inter = {}
    for pid, area in zip(pair_ids.tolist(), pair_area.tolist()):
        inter[(pid // n - 1, pid % n - 1)] = area

    matched_gt, matched_pred = set(), set()
    for (g, p), area in sorted(inter.items()):
        if g < 0 or p < 0 or g // SEG_BASE != p // SEG_BASE:
            continue
        union = pred_area[p] + gt_area[g] - area - inter.get((-1, p), 0)
        iou = area / union
        if iou > MATCH_IOU:
            s = stats._get(g // SEG_BASE)
            s.tp += 1
            s.iou_sum += iou
            matched_gt.add(g)
            matched_pred.add(p)
    for g in sorted(gt_area):
        if g >= 0 and g not in matched_gt:
            stats._get(g // SEG_BASE).fn += 1
    for p in sorted(pred_area):
        if p < 0 or p in matched_pred:
            continue
        if inter.get((-1, p), 0) / pred_area[p] > 0.5:
            continue
        stats._get(p // SEG_BASE).fp += 1
    return stats


def pq_stats(pred, gt):
    if pred.shape != gt.shape:
        raise ParameterError("prediction and ground truth must have the same shape")
    stats = pq_stats_from_keys(_keys(pred), _keys(gt))
    stats.thing_classes |= set(pred.thing_classes) | set(gt.thing_classes)
    return stats


def pq(pred, gt):
    """``(PQ, PQ_things, PQ_stuff, stats)`` for one frame."""
    stats = pq_stats(pred, gt)
    return stats.result() + (stats,)


# -- video ----------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    pred: object
    gt: object
    pred_depth: object = None
    gt_depth: object = None


class VideoSequence:
    """Ordered frames of predicted/ground-truth panoptic maps with optional depth."""

    def __init__(self, frames):
        self.frames = tuple(f if isinstance(f, Frame) else Frame(*f) for f in frames)
        for i, f in enumerate(self.frames):
            if f.pred.shape != f.gt.shape:
                raise ParameterError(f"frame {i}: prediction and ground truth differ in shape")
            for d in (f.pred_depth, f.gt_depth):
                if d is not None and as_array(d).shape != f.gt.shape:
                    raise ParameterError(f"frame {i}: depth shape does not match panoptic shape")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def has_depth(self):
        return all(f.pred_depth is not None and f.gt_depth is not None for f in self.frames)


def _window_stats(pred_keys, gt_keys, things, k):
    total = PqStats()
    for start in range(len(pred_keys) - k + 1):
        stats = pq_stats_from_keys(
            np.concatenate([p.ravel() for p in pred_keys[start : start + k]]),
            np.concatenate([g.ravel() for g in gt_keys[start : start + k]]),
        )
        total += stats
    total.thing_classes |= things
    return total


def _things(seq):
    out = set()
    for f in seq:
        out |= set(f.pred.thing_classes) | set(f.gt.thing_classes)
    return out


def vpq_stats(seq, k, pred_keys=None):
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ParameterError("window size k must be a positive integer")
    if k > len(seq):
        raise ParameterError(f"window size {k} exceeds sequence length {len(seq)}")
    if pred_keys is None:
        pred_keys = [_keys(f.pred) for f in seq]
    gt_keys = [_keys(f.gt) for f in seq]
    return _window_stats(pred_keys, gt_keys, _things(seq), k)


def vpq(seq, k):
    """``(VPQ_k, things, stuff)`` with every window of ``k`` consecutive frames."""
    return vpq_stats(seq, k).result()


def depth_voided_keys(seq, lam):
    """Predicted segment ids with depth-inaccurate pixels set to void."""
    if not lam > 0:
        raise ParameterError("lambda must be positive")
    if not seq.has_depth:
        raise ParameterError("every frame needs predicted and ground-truth depth")
    out = []
    for f in seq:
        keys = _keys(f.pred).copy()
        pred_d, gt_d = as_array(f.pred_depth), as_array(f.gt_depth)
        valid = gt_d > 0
        rel = np.zeros_like(gt_d)
        rel[valid] = np.abs(pred_d[valid] - gt_d[valid]) / gt_d[valid]
        keys[valid & (rel > lam)] = -1
        out.append(keys)
    return out


def dvpq(seq, k, lam):
    """Depth-aware VPQ: ``(DVPQ, things, stuff)``."""
    return vpq_stats(seq, k, depth_voided_keys(seq, lam)).result()


@dataclass(frozen=True)
class DvpqTable:
    """Grid of ``(value, things, stuff)`` cells keyed by ``(k, lambda)``."""

    ks: tuple
    lambdas: tuple
    cells: dict

    def _mean(self, keys):
        vals = np.array([self.cells[key] for key in keys])
        return tuple(float(v) for v in vals.mean(axis=0))

    def row_mean(self, lam):
        return self._mean([(k, lam) for k in self.ks])

    def column_mean(self, k):
        return self._mean([(k, lam) for lam in self.lambdas])

    @property
    def grand_mean(self):
        return self._mean(list(self.cells))

    def to_csv(self):
        buf = io.StringIO()
        buf.write("k,lambda,dvpq,things,stuff\n")
        for lam in self.lambdas:
            for k in self.ks:
                v, th, st = self.cells[(k, lam)]
                buf.write(f"{k},{lam:g},{v:.6f},{th:.6f},{st:.6f}\n")
        return buf.getvalue()

    def to_text(self):
        def cell(c):
            return f"{c[0]:5.1f} | {c[1]:5.1f} | {c[2]:5.1f}"

        header = ["lambda"] + [f"k = {k}" for k in self.ks] + ["Average"]
        rows = []
        for lam in self.lambdas:
            rows.append([f"{lam:.2f}"] + [cell(self.cells[(k, lam)]) for k in self.ks]
                        + [cell(self.row_mean(lam))])
        rows.append(["Average"] + [cell(self.column_mean(k)) for k in self.ks]
                    + [cell(self.grand_mean)])
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + rows]
        return "\n".join(lines) + "\n"


def dvpq_average(seq, ks=CITYSCAPES_KS, lambdas=DEFAULT_LAMBDAS):
    ks, lambdas = tuple(ks), tuple(lambdas)
    if not ks or not lambdas:
        raise ParameterError("need at least one k and one lambda")
    voided = {lam: depth_voided_keys(seq, lam) for lam in lambdas}
    cells = {}
    for lam in lambdas:
        for k in ks:
            cells[(k, lam)] = vpq_stats(seq, k, voided[lam]).result()
    return DvpqTable(ks, lambdas, cells)
