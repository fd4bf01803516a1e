"""Zoom-ratio rules and region zooming with an exact inverse mapping.

A proposal box is magnified (or shrunk) so its long side lands on a target
size: part boxes always aim at the full target; object boxes aim at a
reduced target when the predicted labeling inside the box shows no legs
(a person with hidden legs is effectively an upper body, so it needs less
magnification). Ratios are clamped to a fixed range.

Zooming crops the box's pixel rectangle (already clamped to the image) and
bilinearly resizes it; the crop offsets and the resize mapping are stored
so scores computed on the zoomed region can be resampled back into exact
image coordinates for merging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import AbsBox, Grid2D, LabelMap, ScoreMap, bilinear_resize
from .sen import OBJECT_LEVEL, PART_LEVEL, RoiProposal


@dataclass(frozen=True)
class ZoomConfig:
    s_t_full: float = 255.0
    s_t_truncated: float = 140.0
    ratio_min: float = 0.4
    ratio_max: float = 2.5
    leg_pixel_fraction: float = 0.001
    # classes whose presence marks a full body; empty = always use the full
    # target (generic, non-humanoid class lists)
    leg_class_ids: tuple = (5, 6)

    def __post_init__(self):
        if not (0.0 < self.ratio_min <= self.ratio_max):
            raise ValueError("need 0 < ratio_min <= ratio_max")
        if self.s_t_full <= 0 or self.s_t_truncated <= 0:
            raise ValueError("target sizes must be positive")
        if not (0.0 <= self.leg_pixel_fraction <= 1.0):
            raise ValueError("leg_pixel_fraction must be in [0, 1]")


def zoom_ratio(
    box: AbsBox,
    parts_in_box: LabelMap | None,
    level: str,
    cfg: ZoomConfig,
) -> float:
    """Target size over long side, clamped.

    Object level consults ``parts_in_box`` (the predicted part labels over
    the box's pixel rectangle): a leg-pixel fraction below the threshold
    selects the truncated target. Part level always uses the full target.
    """
    if box.w <= 0 or box.h <= 0:
        raise ValueError("degenerate box")
    if level == PART_LEVEL:
        s_t = cfg.s_t_full
    elif level == OBJECT_LEVEL:
        if not cfg.leg_class_ids:
            s_t = cfg.s_t_full
        else:
            if parts_in_box is None:
                raise ValueError("object-level ratio needs the in-box labels")
            px0, py0, px1, py1 = box.pixel_rect()
            rw, rh = px1 - px0, py1 - py0
            if (parts_in_box.width, parts_in_box.height) != (rw, rh):
                raise ValueError(
                    "parts_in_box must cover the box's pixel rectangle "
                    f"({rw}x{rh}, got {parts_in_box.width}x{parts_in_box.height})"
                )
            frac = float(np.isin(parts_in_box.labels, cfg.leg_class_ids).mean())
            s_t = cfg.s_t_full if frac >= cfg.leg_pixel_fraction else cfg.s_t_truncated
    else:
        raise ValueError(f"unknown level {level!r}")
    return min(max(s_t / max(box.w, box.h), cfg.ratio_min), cfg.ratio_max)


def _zoom_dim(n: int, ratio: float) -> int:
    return max(1, math.floor(n * ratio + 0.5))


@dataclass(frozen=True)
class ZoomedRegion:
    """A magnified crop plus everything needed to map results back."""

    source_box: AbsBox
    ratio: float
    zoomed_img: Grid2D
    zoomed_prior: ScoreMap | None
    confidence: float
    crop_x0: int
    crop_y0: int
    crop_w: int
    crop_h: int

    def __post_init__(self):
        zw, zh = _zoom_dim(self.crop_w, self.ratio), _zoom_dim(self.crop_h, self.ratio)
        if (self.zoomed_img.width, self.zoomed_img.height) != (zw, zh):
            raise ValueError(
                f"zoomed dims {self.zoomed_img.width}x{self.zoomed_img.height} "
                f"!= round(crop dims x ratio) = {zw}x{zh}"
            )
        if self.zoomed_prior is not None and (
            (self.zoomed_prior.width, self.zoomed_prior.height) != (zw, zh)
        ):
            raise ValueError("zoomed prior size differs from the zoomed image")

    @property
    def zoomed_w(self) -> int:
        return self.zoomed_img.width

    @property
    def zoomed_h(self) -> int:
        return self.zoomed_img.height

    # pixel-center coordinate maps (consistent with bilinear_resize)
    def to_source(self, u: float, v: float):
        x = self.crop_x0 + (u + 0.5) * (self.crop_w / self.zoomed_w) - 0.5
        y = self.crop_y0 + (v + 0.5) * (self.crop_h / self.zoomed_h) - 0.5
        return x, y

    def to_zoomed(self, x: float, y: float):
        u = (x - self.crop_x0 + 0.5) * (self.zoomed_w / self.crop_w) - 0.5
        v = (y - self.crop_y0 + 0.5) * (self.zoomed_h / self.crop_h) - 0.5
        return u, v

    def box_to_source(self, b: AbsBox) -> AbsBox:
        sx = self.crop_w / self.zoomed_w
        sy = self.crop_h / self.zoomed_h
        x0, y0 = self.to_source(b.x_min, b.y_min)
        return AbsBox(x0, y0, b.w * sx, b.h * sy)


def zoom_region(
    img: Grid2D,
    prior: ScoreMap | None,
    prop: RoiProposal,
    ratio: float,
    cfg: ZoomConfig,
) -> ZoomedRegion:
    """Crop the proposal's pixel rectangle and resize it by ``ratio``."""
    if not (cfg.ratio_min <= ratio <= cfg.ratio_max):
        raise ValueError(f"ratio {ratio} outside [{cfg.ratio_min}, {cfg.ratio_max}]")
    if prior is not None and (prior.width, prior.height) != (img.width, img.height):
        raise ValueError("prior size differs from the image")
    clipped = prop.box.clip_to(img.width, img.height)
    if clipped is None:
        raise ValueError(f"box {prop.box} lies outside the {img.width}x{img.height} image")
    x0, y0, x1, y1 = clipped.pixel_rect()
    x1, y1 = min(x1, img.width), min(y1, img.height)
    rw, rh = x1 - x0, y1 - y0
    zw, zh = _zoom_dim(rw, ratio), _zoom_dim(rh, ratio)

    crop_img = Grid2D(np.ascontiguousarray(img.values[y0 : y0 + rh, x0 : x0 + rw]))
    zoomed_img = bilinear_resize(crop_img, zw, zh)
    zoomed_prior = None
    if prior is not None:
        crop_pri = ScoreMap(
            np.ascontiguousarray(prior.values[y0 : y0 + rh, x0 : x0 + rw]),
            normalized=prior.normalized,
        )
        zoomed_prior = bilinear_resize(crop_pri, zw, zh)
    return ZoomedRegion(
        source_box=clipped,
        ratio=ratio,
        zoomed_img=zoomed_img,
        zoomed_prior=zoomed_prior,
        confidence=prop.confidence,
        crop_x0=x0,
        crop_y0=y0,
        crop_w=rw,
        crop_h=rh,
    )


def unzoom_scores(z: ZoomedRegion, roi_scores: ScoreMap, canvas_w: int, canvas_h: int):
    """Resample ROI scores back to source scale and paste at the crop offset.

    Returns (scores on an all-zero canvas, binary coverage mask). Pixels
    outside the coverage mask are zero and carry no meaning.
    """
    if (roi_scores.width, roi_scores.height) != (z.zoomed_w, z.zoomed_h):
        raise ValueError(
            f"roi scores {roi_scores.width}x{roi_scores.height} != "
            f"zoomed dims {z.zoomed_w}x{z.zoomed_h}"
        )
    if z.crop_x0 + z.crop_w > canvas_w or z.crop_y0 + z.crop_h > canvas_h:
        raise ValueError("canvas does not contain the source box placement")
    back = bilinear_resize(roi_scores, z.crop_w, z.crop_h)
    canvas = np.zeros((canvas_h, canvas_w, roi_scores.channels))
    canvas[z.crop_y0 : z.crop_y0 + z.crop_h, z.crop_x0 : z.crop_x0 + z.crop_w] = back.values
    mask = np.zeros((canvas_h, canvas_w, 1))
    mask[z.crop_y0 : z.crop_y0 + z.crop_h, z.crop_x0 : z.crop_x0 + z.crop_w] = 1.0
    return ScoreMap(canvas, normalized=False), Grid2D(mask)
