"""Evaluation: per-class/mean IOU, size-binned mIOU, and instance AP.

Conventions documented here because the numbers depend on them:

- Classes absent from both prediction and ground truth are excluded from
  the mean IOU (avoids 0/0 at small scale).
- Size bins over s_b = sqrt(box area) are half-open: XS [0,80), S [80,140),
  M [140,220), L [220,520); instances with s_b >= 520 go to a separate
  "over" report and are never silently dropped.
- Instance AP: a predicted instance hits a ground-truth instance when
  their part-labeled IOU reaches the threshold, where the intersection
  counts only pixels whose part labels agree and the union is the plain
  support union. Matching is greedy in descending score (ties: input
  order), each ground truth matched at most once. AP is the all-points
  interpolated area under precision/recall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import AbsBox, Grid2D, LabelMap

SIZE_BINS = (("XS", 0.0, 80.0), ("S", 80.0, 140.0), ("M", 140.0, 220.0), ("L", 220.0, 520.0))
OVERFLOW_BIN = "over"
BIN_NAMES = tuple(name for name, _, _ in SIZE_BINS) + (OVERFLOW_BIN,)


def bin_of(s_b: float) -> str:
    for name, lo, hi in SIZE_BINS:
        if lo <= s_b < hi:
            return name
    return OVERFLOW_BIN


def _hist(pred: np.ndarray, gt: np.ndarray, c: int) -> np.ndarray:
    """c x c confusion counts; rows = gt class, cols = predicted class."""
    return np.bincount(c * gt.ravel() + pred.ravel(), minlength=c * c).reshape(c, c)


def _iou_from_hist(hist: np.ndarray):
    inter = np.diag(hist).astype(float)
    union = hist.sum(axis=0) + hist.sum(axis=1) - np.diag(hist)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    mean = float(np.nanmean(iou)) if np.isfinite(iou).any() else float("nan")
    return iou, mean


def miou(pred: LabelMap, gt: LabelMap, num_classes: int):
    """Per-class IOU (nan for classes absent from both) and their mean."""
    if (pred.width, pred.height) != (gt.width, gt.height):
        raise ValueError("prediction and ground truth sizes differ")
    if pred.num_classes > num_classes or gt.num_classes > num_classes:
        raise ValueError("label maps exceed num_classes")
    return _iou_from_hist(_hist(pred.labels, gt.labels, num_classes))


def size_binned_miou(pred: LabelMap, gt: LabelMap, instances):
    """mIOU restricted to the union of member boxes of each size bin.

    ``instances`` is a list of (mask, AbsBox) pairs; bins are assigned from
    sqrt(box area). Returns {bin name: (miou or nan, instance count)}.
    """
    c = max(pred.num_classes, gt.num_classes)
    sel = {name: np.zeros(gt.labels.shape, dtype=bool) for name in BIN_NAMES}
    counts = dict.fromkeys(BIN_NAMES, 0)
    for _, box in instances:
        name = bin_of(np.sqrt(box.w * box.h))
        counts[name] += 1
        x0, y0, x1, y1 = box.pixel_rect()
        x0, y0 = max(0, x0), max(0, y0)
        x1 = min(pred.width, x1)
        y1 = min(pred.height, y1)
        if x1 > x0 and y1 > y0:
            sel[name][y0:y1, x0:x1] = True
    out = {}
    for name in BIN_NAMES:
        if counts[name] == 0:
            out[name] = (float("nan"), 0)
            continue
        m = sel[name]
        _, mean = _iou_from_hist(_hist(pred.labels[m], gt.labels[m], c))
        out[name] = (mean, counts[name])
    return out


# ---------------------------------------------------------------------------
# instance-level AP


def _part_iou(pred: LabelMap, gt: LabelMap) -> float:
    ps = pred.labels > 0
    gs = gt.labels > 0
    union = int((ps | gs).sum())
    if union == 0:
        return 0.0
    inter = int((ps & gs & (pred.labels == gt.labels)).sum())
    return inter / union


def match_instances(pred_instances, gt_instances, iou_threshold: float = 0.5):
    """Greedy per-image matching; returns [(score, is_tp), ...] sorted by
    descending score, plus the ground-truth count."""
    order = sorted(range(len(pred_instances)), key=lambda i: -pred_instances[i][1])
    taken = [False] * len(gt_instances)
    records = []
    for i in order:
        plab, score = pred_instances[i]
        best, best_j = 0.0, -1
        for j, glab in enumerate(gt_instances):
            if taken[j]:
                continue
            v = _part_iou(plab, glab)
            if v > best:
                best, best_j = v, j
        if best >= iou_threshold and best_j >= 0:
            taken[best_j] = True
            records.append((score, True))
        else:
            records.append((score, False))
    return records, len(gt_instances)


def average_precision(records, n_gt: int) -> float:
    """All-points interpolated AP from pooled (score, is_tp) records."""
    if n_gt == 0:
        return 1.0 if not records else 0.0
    if not records:
        return 0.0
    order = sorted(range(len(records)), key=lambda i: -records[i][0])
    tp = np.cumsum([1 if records[i][1] else 0 for i in order])
    fp = np.cumsum([0 if records[i][1] else 1 for i in order])
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, 1)
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    ap, prev = 0.0, 0.0
    for r, p in zip(rec, prec):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return float(ap)


def ap_r_part(pred_instances, gt_instances, iou_threshold: float = 0.5) -> float:
    """Single-image instance AP over part-labeled instance maps."""
    records, n_gt = match_instances(pred_instances, gt_instances, iou_threshold)
    return average_precision(records, n_gt)


def restrict_labels(labels: LabelMap, mask: Grid2D) -> LabelMap:
    """Labels inside the mask, background elsewhere."""
    m = mask.values[:, :, 0] > 0.5
    return LabelMap(np.where(m, labels.labels, 0).astype(np.int32), labels.num_classes)


def build_pred_instances(final: LabelMap, instance_boxes, coarse_masks):
    """Cut the final labeling into per-instance part maps.

    Pixels claimed by several masks go to the highest-confidence instance
    (ties: earlier in the list). Returns [(instance part LabelMap, score)].
    """
    if len(instance_boxes) != len(coarse_masks):
        raise ValueError("need one coarse mask per proposal")
    owner = np.full((final.height, final.width), -1, dtype=np.int32)
    order = sorted(
        range(len(instance_boxes)), key=lambda i: (instance_boxes[i].confidence, -i)
    )
    for i in order:  # ascending confidence: the best paints last
        m = coarse_masks[i].values[:, :, 0] > 0.5
        owner[m] = i
    out = []
    for i, prop in enumerate(instance_boxes):
        mine = owner == i
        lab = np.where(mine, final.labels, 0).astype(np.int32)
        out.append((LabelMap(lab, final.num_classes), prop.confidence))
    return out


# ---------------------------------------------------------------------------
# dataset-level aggregation


@dataclass
class EvalReport:
    per_class: np.ndarray  # IOU per class id, nan where absent everywhere
    mean: float
    bin_miou: dict
    bin_counts: dict
    ap: float
    images: int
    instances: int

    def __post_init__(self):
        vals = [v for v in self.per_class if np.isfinite(v)]
        vals += [v for v in self.bin_miou.values() if np.isfinite(v)]
        if np.isfinite(self.mean):
            vals.append(self.mean)
        if np.isfinite(self.ap):
            vals.append(self.ap)
        for v in vals:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"metric value {v} outside [0, 1]")


class EvalAccumulator:
    """Pools per-image statistics into one report.

    mIOU pools confusion counts; bins pool restricted counts; AP pools
    per-image greedy match records and recomputes the curve at the end.
    """

    def __init__(self, num_classes: int, iou_threshold: float = 0.5):
        self.c = num_classes
        self.thr = iou_threshold
        self.hist = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.bin_hists = {n: np.zeros((num_classes, num_classes), dtype=np.int64) for n in BIN_NAMES}
        self.bin_counts = dict.fromkeys(BIN_NAMES, 0)
        self.records = []
        self.n_gt = 0
        self.images = 0

    def add_image(self, pred: LabelMap, gt: LabelMap, instances, pred_instances, gt_instances):
        """instances: (mask, box) pairs for binning; pred/gt_instances feed AP."""
        self.images += 1
        self.hist += _hist(pred.labels, gt.labels, self.c)
        for _, box in instances:
            name = bin_of(np.sqrt(box.w * box.h))
            self.bin_counts[name] += 1
            x0, y0, x1, y1 = box.pixel_rect()
            sel = np.zeros(gt.labels.shape, dtype=bool)
            sel[max(0, y0) : min(gt.height, y1), max(0, x0) : min(gt.width, x1)] = True
            self.bin_hists[name] += _hist(pred.labels[sel], gt.labels[sel], self.c)
        recs, n = match_instances(pred_instances, gt_instances, self.thr)
        self.records.extend(recs)
        self.n_gt += n

    def report(self) -> EvalReport:
        per_class, mean = _iou_from_hist(self.hist)
        bins = {}
        for name in BIN_NAMES:
            if self.bin_counts[name] == 0:
                bins[name] = float("nan")
            else:
                _, m = _iou_from_hist(self.bin_hists[name])
                bins[name] = m
        return EvalReport(
            per_class=per_class,
            mean=mean,
            bin_miou=bins,
            bin_counts=dict(self.bin_counts),
            ap=average_precision(self.records, self.n_gt),
            images=self.images,
            instances=sum(self.bin_counts.values()),
        )


def report_csv(named_reports, class_names) -> str:
    """One row per method, percentages with 2 decimals, mirroring the usual
    part-segmentation table layout (classes, background, average, size
    bins, instance AP). ``class_names`` is indexed by class id."""

    def pct(v):
        return f"{100.0 * v:.2f}" if np.isfinite(v) else "-"

    cols = ["method"]
    cols += [class_names[i] for i in range(1, len(class_names))]
    cols += [class_names[0], "avg", "XS", "S", "M", "L", "over", "ap_r"]
    lines = [",".join(cols)]
    for name, rep in named_reports:
        row = [name]
        row += [pct(rep.per_class[i]) for i in range(1, len(class_names))]
        row += [pct(rep.per_class[0]), pct(rep.mean)]
        row += [pct(rep.bin_miou[b]) for b in BIN_NAMES]
        row.append(pct(rep.ap))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
