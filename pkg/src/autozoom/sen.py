"""Scale estimation: dense box targets, losses, decoding and suppression.

Every pixel of a region carries the offset to its region's box center plus
the box size, all divided by a fixed normalization constant; a sparse set of
"confidence seed" pixels near each region center marks where the regression
is trusted. Decoding thresholds the seed confidence and inverts the
encoding, and greedy NMS reduces the dense field to a handful of proposals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .grid import AbsBox, Grid2D, LabelMap

# box offsets and sizes are stored divided by this constant
REG_SCALE = 400.0

OBJECT_LEVEL = "object"
PART_LEVEL = "part"


@dataclass(frozen=True)
class SenLossConfig:
    """Weights and geometry for seed/regression supervision."""

    lambda_: float = 1.0
    seed_window: int = 7

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.seed_window < 1 or self.seed_window % 2 == 0:
            raise ValueError("seed_window must be odd and >= 1")


@dataclass(frozen=True)
class RoiProposal:
    """A decoded region-of-interest with its seed confidence."""

    box: AbsBox
    confidence: float

    def __post_init__(self):
        if not (0.0 < self.confidence <= 1.0):
            raise ValueError(f"confidence must be in (0, 1], got {self.confidence}")


@dataclass(frozen=True)
class SenTargets:
    """Dense training targets: 4-channel regression map + binary seed map."""

    reg: Grid2D
    seeds: Grid2D

    def __post_init__(self):
        if self.reg.channels != 4:
            raise ValueError("regression targets need 4 channels")
        if self.seeds.channels != 1:
            raise ValueError("seed map needs 1 channel")
        sv = self.seeds.values
        if not np.isin(sv, (0.0, 1.0)).all():
            raise ValueError("seed map must be binary")
        if (self.reg.width, self.reg.height) != (self.seeds.width, self.seeds.height):
            raise ValueError("regression and seed maps must share their size")

    @property
    def num_seeds(self) -> int:
        return int(self.seeds.values.sum())


def _region_pixel_sets(masks, level, gt: LabelMap):
    """Pixel index arrays (ys, xs) for every region at the given level."""
    if level == OBJECT_LEVEL:
        regions = []
        for m in masks:
            if (m.width, m.height) != (gt.width, gt.height):
                raise ValueError("instance mask size differs from the label map")
            ys, xs = np.nonzero(m.values[:, :, 0])
            if ys.size:
                regions.append((ys, xs))
        return regions
    if level == PART_LEVEL:
        regions = []
        for c in range(1, gt.num_classes):
            comp, n = ndimage.label(gt.labels == c)  # 4-connectivity
            for k in range(1, n + 1):
                ys, xs = np.nonzero(comp == k)
                regions.append((ys, xs))
        return regions
    raise ValueError(f"unknown level {level!r}")


def build_sen_targets(masks, level: str, gt: LabelMap, cfg: SenLossConfig) -> SenTargets:
    """Encode region boxes densely and mark the central seed window.

    Object level uses the given instance masks; part level ignores them and
    takes 4-connected components of each non-background class in ``gt``.
    When regions overlap, the later one owns the contested pixels. An empty
    scene yields all-zero targets.
    """
    h, w = gt.height, gt.width
    regions = _region_pixel_sets(masks, level, gt)

    owner = np.full((h, w), -1, dtype=np.int32)
    for idx, (ys, xs) in enumerate(regions):
        owner[ys, xs] = idx

    reg = np.zeros((h, w, 4))
    seeds = np.zeros((h, w, 1))
    half = cfg.seed_window // 2
    for idx in range(len(regions)):
        ys, xs = np.nonzero(owner == idx)
        if ys.size == 0:
            continue
        bx, by = xs.min(), ys.min()
        bw = xs.max() - bx + 1
        bh = ys.max() - by + 1
        cx = bx + bw / 2.0
        cy = by + bh / 2.0
        reg[ys, xs, 0] = (cx - xs) / REG_SCALE
        reg[ys, xs, 1] = (cy - ys) / REG_SCALE
        reg[ys, xs, 2] = bw / REG_SCALE
        reg[ys, xs, 3] = bh / REG_SCALE

        # seed at the region pixel nearest the centroid (ties: lowest y, x)
        d2 = (xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2
        rep = np.lexsort((xs, ys, d2))[0]
        ry, rx = ys[rep], xs[rep]
        inwin = (np.abs(xs - rx) <= half) & (np.abs(ys - ry) <= half)
        seeds[ys[inwin], xs[inwin], 0] = 1.0

    return SenTargets(reg=Grid2D(reg), seeds=Grid2D(seeds))


def sen_loss(
    pred_conf_logit: Grid2D,
    pred_reg: Grid2D,
    tgt: SenTargets,
    cfg: SenLossConfig,
):
    """Balanced seed cross-entropy plus mean squared regression error at seeds.

    Returns (loss, grad wrt conf logits, grad wrt regression outputs); the
    gradients are exact. With zero seed pixels the regression term is
    defined as 0 and only the (fully negative) confidence term remains.
    """
    if pred_conf_logit.channels != 1 or pred_reg.channels != 4:
        raise ValueError("expected 1 confidence channel and 4 regression channels")
    if (pred_conf_logit.height, pred_conf_logit.width) != (tgt.seeds.height, tgt.seeds.width):
        raise ValueError("confidence prediction size differs from targets")
    if (pred_reg.height, pred_reg.width) != (tgt.reg.height, tgt.reg.width):
        raise ValueError("regression prediction size differs from targets")

    logit = pred_conf_logit.values[:, :, 0]
    seed = tgt.seeds.values[:, :, 0] > 0.5
    n_pix = seed.size
    n_seed = int(seed.sum())
    beta = (n_pix - n_seed) / n_pix

    log_sig = -np.logaddexp(0.0, -logit)
    log_one_minus = -np.logaddexp(0.0, logit)
    l_conf = -(beta * log_sig[seed].sum() + (1.0 - beta) * log_one_minus[~seed].sum())

    sig = expit(logit)
    grad_conf = np.where(seed, -beta * (1.0 - sig), (1.0 - beta) * sig)
    grad_conf = grad_conf * cfg.lambda_

    grad_reg = np.zeros_like(pred_reg.values)
    if n_seed > 0:
        diff = pred_reg.values - tgt.reg.values
        diff = np.where(seed[:, :, None], diff, 0.0)
        l_reg = float((diff ** 2).sum()) / n_seed
        grad_reg = (2.0 / n_seed) * diff
    else:
        l_reg = 0.0

    loss = l_reg + cfg.lambda_ * l_conf
    return float(loss), Grid2D(grad_conf[:, :, None]), Grid2D(grad_reg)


def decode_proposals(
    pred_conf_logit: Grid2D,
    pred_reg: Grid2D,
    threshold: float = 0.5,
    stride: int = 1,
):
    """Invert the dense encoding at every confident pixel.

    A pixel whose sigmoid confidence exceeds ``threshold`` emits the box
    centered at pixel + REG_SCALE * (dx, dy) with size REG_SCALE * (w, h),
    clamped to at least one pixel on each side. ``stride`` subsamples the
    pixel grid for speed; stride=1 is exact.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must be in (0, 1)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if (pred_conf_logit.height, pred_conf_logit.width) != (pred_reg.height, pred_reg.width):
        raise ValueError("confidence and regression sizes differ")

    logit = pred_conf_logit.values[::stride, ::stride, 0]
    sig = expit(logit)
    sub_ys, sub_xs = np.nonzero(sig > threshold)
    props = []
    for sy, sx in zip(sub_ys, sub_xs):
        iy, ix = sy * stride, sx * stride
        dx, dy, rw, rh = pred_reg.values[iy, ix]
        cx = ix + REG_SCALE * dx
        cy = iy + REG_SCALE * dy
        bw = max(REG_SCALE * rw, 1.0)
        bh = max(REG_SCALE * rh, 1.0)
        props.append(
            RoiProposal(
                box=AbsBox(cx - bw / 2.0, cy - bh / 2.0, bw, bh),
                confidence=float(sig[sy, sx]),
            )
        )
    return props


def nms(props, iou_threshold: float):
    """Greedy non-maximum suppression by descending confidence.

    Ties break toward the larger box, then input order. A proposal is kept
    iff its IOU with every already-kept proposal is <= ``iou_threshold``.
    """
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError("iou_threshold must be in (0, 1)")
    if not props:
        return []
    order = sorted(
        range(len(props)),
        key=lambda i: (-props[i].confidence, -props[i].box.area, i),
    )
    boxes = np.array(
        [[p.box.x_min, p.box.y_min, p.box.x_max, p.box.y_max, p.box.area] for p in props]
    )
    kept: list[int] = []
    for i in order:
        if kept:
            kb = boxes[kept]
            ix = np.minimum(kb[:, 2], boxes[i, 2]) - np.maximum(kb[:, 0], boxes[i, 0])
            iy = np.minimum(kb[:, 3], boxes[i, 3]) - np.maximum(kb[:, 1], boxes[i, 1])
            inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
            iou = inter / (kb[:, 4] + boxes[i, 4] - inter)
            if (iou > iou_threshold).any():
                continue
        kept.append(i)
    return [props[i] for i in kept]


def proposals_to_text(props) -> str:
    """One proposal per line: confidence x_min y_min w h, 6 decimals."""
    return "".join(
        f"{p.confidence:.6f} {p.box.x_min:.6f} {p.box.y_min:.6f} "
        f"{p.box.w:.6f} {p.box.h:.6f}\n"
        for p in props
    )


def proposals_from_text(text: str):
    props = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        conf, x, y, w, h = (float(t) for t in line.split())
        props.append(RoiProposal(box=AbsBox(x, y, w, h), confidence=conf))
    return props
