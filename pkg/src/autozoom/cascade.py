"""Three-stage zoom cascade: whole image, then objects, then parts.

Each stage scores its view with a shallow scorer and regresses boxes for the
next level. Boxes are decoded, deduplicated, magnified to a canonical scale,
re-scored, and folded back into the running score map as a per-pixel
confidence-weighted average. Pixels no region covers keep the previous
stage's scores.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    AbsBox,
    Grid2D,
    LabelMap,
    ScoreMap,
    argmax_labels,
    bilinear_resize,
    crop_labels,
    softmax_channels,
)
from .scorer import ScorerParams, extract_features, forward, load_params
from .sen import OBJECT_LEVEL, PART_LEVEL, RoiProposal, decode_proposals, nms
from .zoom import ZoomConfig, zoom_ratio, zoom_region, unzoom_scores

IMAGE_STAGE = "image"

# label colors for overlays, one row per class id
CLASS_COLORS = np.array(
    [
        [0, 0, 0],        # background
        [214, 39, 40],    # head
        [31, 119, 180],   # torso
        [255, 187, 18],   # upper arms
        [148, 103, 189],  # lower arms
        [44, 160, 44],    # upper legs
        [140, 86, 75],    # lower legs
    ],
    dtype=np.uint8,
)

_BOX_COLORS = {OBJECT_LEVEL: (1.0, 1.0, 1.0), PART_LEVEL: (0.0, 0.95, 0.95)}


@dataclass(frozen=True)
class CascadeConfig:
    """Everything run_hazn needs besides the images and the weights."""

    enable_object_stage: bool = True
    enable_part_stage: bool = True
    zoom: ZoomConfig = field(default_factory=ZoomConfig)
    decode_threshold: float = 0.5
    object_nms_threshold: float = 0.4
    part_nms_threshold: float = 0.4
    image_decode_stride: int = 4
    roi_decode_stride: int = 2
    max_object_rois: int = 15
    max_part_rois: int = 40
    image_model_path: str | None = None
    object_model_path: str | None = None
    part_model_path: str | None = None

    def __post_init__(self):
        if not 0.0 < self.decode_threshold < 1.0:
            raise ValueError("decode_threshold must be in (0, 1)")
        for t in (self.object_nms_threshold, self.part_nms_threshold):
            if not 0.0 <= t <= 1.0:
                raise ValueError("nms thresholds must be in [0, 1]")
        if self.image_decode_stride < 1 or self.roi_decode_stride < 1:
            raise ValueError("decode strides must be >= 1")
        if self.max_object_rois < 1 or self.max_part_rois < 1:
            raise ValueError("roi caps must be >= 1")


def load_stage_models(cfg: CascadeConfig):
    """Load the (image, object, part) weights named by the config."""
    paths = (cfg.image_model_path, cfg.object_model_path, cfg.part_model_path)
    if any(p is None for p in paths):
        raise ValueError("config does not name all three stage models")
    return tuple(load_params(p) for p in paths)


@dataclass
class StageOutput:
    """One stage's merged scores plus what it handed to the next stage."""

    level: str
    scores: ScoreMap
    proposals: list  # RoiProposal for the next stage, post-NMS
    regions: list  # ZoomedRegion this stage actually scored

    def __post_init__(self):
        if not self.scores.normalized:
            raise ValueError("stage scores must be normalized")


def run_stage(model: ScorerParams, img: Grid2D, prior: Grid2D | None = None):
    """Score a single view.

    Returns normalized class scores plus the raw confidence-logit and
    box-regression maps the next level decodes its proposals from.
    """
    if (prior is not None) != (model.num_prior > 0):
        raise ValueError(
            "model prior width does not match the supplied prior "
            f"(num_prior={model.num_prior}, prior given: {prior is not None})"
        )
    feats = extract_features(img, prior)
    part_logits, conf_logit, reg = forward(model, feats)
    return softmax_channels(part_logits), conf_logit, reg


def merge_scores(base: ScoreMap, contributions) -> ScoreMap:
    """Fold re-scored regions into the base map.

    ``contributions`` pairs each ZoomedRegion with its normalized ROI scores.
    At a pixel covered by one or more regions the output is the
    confidence-weighted average of their unzoomed scores; everywhere else the
    base scores pass through unchanged.
    """
    if not base.normalized:
        raise ValueError("base scores must be normalized")
    num = np.zeros_like(base.values)
    den = np.zeros((base.height, base.width))
    for region, roi_scores in contributions:
        if roi_scores.channels != base.channels:
            raise ValueError("contribution channel count differs from the base")
        if not getattr(roi_scores, "normalized", False):
            raise ValueError("roi scores must be normalized")
        canvas, mask = unzoom_scores(region, roi_scores, base.width, base.height)
        num += region.confidence * canvas.values
        den += region.confidence * mask.values[:, :, 0]
    covered = den > 0.0
    out = base.values.copy()
    out[covered] = num[covered] / den[covered, None]
    return ScoreMap(out, normalized=True)


def _zoom_rois(img, prior_map, props, level, cfg: CascadeConfig, labels=None):
    """Clip, choose a ratio for, and magnify each proposal.

    Boxes that fall entirely off the image are dropped. Object-level ratios
    consult the current label estimate inside each box.
    """
    regions = []
    for p in props:
        clipped = p.box.clip_to(img.width, img.height)
        if clipped is None:
            continue
        in_box = None
        if level == OBJECT_LEVEL and cfg.zoom.leg_class_ids:
            in_box = crop_labels(labels, clipped)
        ratio = zoom_ratio(clipped, in_box, level, cfg.zoom)
        regions.append(
            zoom_region(
                img,
                prior_map,
                RoiProposal(box=clipped, confidence=p.confidence),
                ratio,
                cfg.zoom,
            )
        )
    return regions


def object_pass(img: Grid2D, m_image: ScorerParams, m_object: ScorerParams, cfg: CascadeConfig):
    """The first two stages, bundled because the part stage consumes both.

    Returns (image scores, object proposals, zoomed regions, merged scores,
    part proposal pool in image coordinates, pre-NMS).
    """
    scores, conf_logit, reg = run_stage(m_image, img, None)
    obj_props = nms(
        decode_proposals(conf_logit, reg, cfg.decode_threshold, cfg.image_decode_stride),
        cfg.object_nms_threshold,
    )[: cfg.max_object_rois]
    regions = _zoom_rois(
        img,
        scores if m_object.num_prior else None,
        obj_props,
        OBJECT_LEVEL,
        cfg,
        argmax_labels(scores),
    )
    contribs = []
    part_pool = []
    for r in regions:
        s, c, g = run_stage(
            m_object, r.zoomed_img, r.zoomed_prior if m_object.num_prior else None
        )
        contribs.append((r, s))
        for pp in decode_proposals(c, g, cfg.decode_threshold, cfg.roi_decode_stride):
            part_pool.append(
                RoiProposal(box=r.box_to_source(pp.box), confidence=pp.confidence)
            )
    merged = merge_scores(scores, contribs) if contribs else scores
    return scores, obj_props, regions, merged, part_pool


def run_hazn(img: Grid2D, models, cfg: CascadeConfig):
    """Run the cascade end to end: (final labels, per-stage outputs).

    Stage order is image → object → part; the two enable flags drop the
    corresponding stage. With the object stage disabled the part stage feeds
    on the image-level box outputs directly, and with both disabled the
    result is the plain image-level argmax. A stage that produces no usable
    regions leaves the previous stage's scores in place.
    """
    if len(models) != 3:
        raise ValueError("expected (image, object, part) models")
    m_image, m_object, m_part = models

    part_pool = []
    if cfg.enable_object_stage:
        scores, obj_props, regions, current, part_pool = object_pass(
            img, m_image, m_object, cfg
        )
        stages = [
            StageOutput(IMAGE_STAGE, scores, obj_props, []),
            StageOutput(OBJECT_LEVEL, current, [], regions),
        ]
    else:
        scores, conf_logit, reg = run_stage(m_image, img, None)
        stages = [StageOutput(IMAGE_STAGE, scores, [], [])]
        current = scores
        if cfg.enable_part_stage:
            # no object scale: the image-level box outputs seed the part stage
            part_pool = decode_proposals(
                conf_logit, reg, cfg.decode_threshold, cfg.image_decode_stride
            )

    if cfg.enable_part_stage:
        part_props = nms(part_pool, cfg.part_nms_threshold)[: cfg.max_part_rois]
        stages[-1].proposals = part_props
        regions = _zoom_rois(
            img, current if m_part.num_prior else None, part_props, PART_LEVEL, cfg
        )
        contribs = []
        for r in regions:
            s, _, _ = run_stage(
                m_part, r.zoomed_img, r.zoomed_prior if m_part.num_prior else None
            )
            contribs.append((r, s))
        if contribs:
            current = merge_scores(current, contribs)
        stages.append(StageOutput(PART_LEVEL, current, [], regions))

    return argmax_labels(current), stages


def multi_scale_average(img: Grid2D, model: ScorerParams, scales=(0.5, 1.0, 1.5)) -> ScoreMap:
    """Fixed-scale pyramid baseline: score resized copies, average, renormalize."""
    if not scales:
        raise ValueError("need at least one scale")
    acc = np.zeros((img.height, img.width, model.num_classes))
    for s in scales:
        if s <= 0:
            raise ValueError("scales must be positive")
        sw = max(1, math.floor(img.width * s + 0.5))
        sh = max(1, math.floor(img.height * s + 0.5))
        view = img if (sw, sh) == (img.width, img.height) else bilinear_resize(img, sw, sh)
        scored, _, _ = run_stage(model, view, None)
        if (sw, sh) != (img.width, img.height):
            scored = bilinear_resize(scored, img.width, img.height)
        acc += scored.values
    acc /= len(scales)
    acc /= acc.sum(axis=2, keepdims=True)
    return ScoreMap(acc, normalized=True)


# ---------------------------------------------------------------------------
# run artifacts

RUN_MANIFEST_MAGIC = "# autozoom-run v1"


def run_manifest(stages) -> str:
    """Plain-text stage trace: one header line per stage, one ROI per line."""
    lines = [RUN_MANIFEST_MAGIC]
    for st in stages:
        lines.append(f"stage {st.level} rois {len(st.regions)}")
        for r in st.regions:
            b = r.source_box
            lines.append(
                "%.6f %.6f %.6f %.6f %.6f %.6f"
                % (r.confidence, b.x_min, b.y_min, b.w, b.h, r.ratio)
            )
    return "\n".join(lines) + "\n"


def parse_run_manifest(text: str):
    """Invert run_manifest: list of (level, [(confidence, box, ratio), ...])."""
    lines = text.strip().splitlines()
    if not lines or lines[0] != RUN_MANIFEST_MAGIC:
        raise ValueError("not a run manifest")
    out = []
    counts = []
    for line in lines[1:]:
        fields = line.split()
        if fields[0] == "stage":
            out.append((fields[1], []))
            counts.append(int(fields[3]))
        else:
            if not out:
                raise ValueError("roi line before any stage line")
            conf, x, y, w, h, ratio = (float(v) for v in fields)
            out[-1][1].append((conf, AbsBox(x, y, w, h), ratio))
    for (_, rois), n in zip(out, counts):
        if len(rois) != n:
            raise ValueError("stage roi count does not match its header")
    return out


def render_overlay(img: Grid2D, labels: LabelMap, stages=(), alpha=0.55) -> Grid2D:
    """Blend class colors over the image and outline the zoomed regions."""
    if (labels.width, labels.height) != (img.width, img.height):
        raise ValueError("labels and image sizes differ")
    out = img.values.copy()
    tint = CLASS_COLORS[np.clip(labels.labels, 0, len(CLASS_COLORS) - 1)] / 255.0
    fg = (labels.labels > 0)[:, :, None]
    out = np.where(fg, (1.0 - alpha) * out + alpha * tint, out)
    for st in stages:
        color = _BOX_COLORS.get(st.level)
        if color is None:
            continue
        for r in st.regions:
            x0, y0, x1, y1 = r.source_box.pixel_rect()
            x0, y0 = max(x0, 0), max(y0, 0)
            x1, y1 = min(x1, img.width), min(y1, img.height)
            if x1 <= x0 or y1 <= y0:
                continue
            out[y0, x0:x1] = color
            out[y1 - 1, x0:x1] = color
            out[y0:y1, x0] = color
            out[y0:y1, x1 - 1] = color
    return Grid2D(np.clip(out, 0.0, 1.0))
