"""Procedural articulated stick-figure scenes with exact part labels.

Figures are stacks of textured capsules (head, torso, two-segment arms and
legs) over a cluttered background. Each part class carries a stripe texture
whose wavelength is proportional to the figure's body scale, tuned so the
stripes hit the scorer's filter bank sweet spot only when the figure is
seen near the canonical zoomed size — small figures are genuinely hard at
native resolution and become easy once magnified.

Occlusion is resolved by painter's order (later figures are nearer). Ground
truth, instance masks, and boxes all derive from the same geometry, so
labels are pixel-exact. Everything is deterministic given (seed, config).

Scale control: for untruncated figures the tight box satisfies
sqrt(w*h) within +-25% of the requested body scale; truncated figures are
deliberately smaller because only the upper body is visible.
"""

from __future__ import annotations

import enum
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .grid import AbsBox, Grid2D, LabelMap, atomic_write_bytes, load_image, load_labels, save_image, save_labels

# the size (long side, pixels) figures are normalized to by the zoom stage;
# texture wavelengths below are specified at this scale
CANONICAL_SCALE = 255.0


class PartClass(enum.IntEnum):
    BACKGROUND = 0
    HEAD = 1
    TORSO = 2
    UPPER_ARMS = 3
    LOWER_ARMS = 4
    UPPER_LEGS = 5
    LOWER_LEGS = 6


NUM_CLASSES = len(PartClass)

BODY_TINT = np.array([0.62, 0.44, 0.38])
HEAD_TINT = np.array([0.87, 0.72, 0.58])

# per-class stripe signature: (wavelength at canonical scale, stripe normal);
# the head is plain, so zero stripe energy is itself a signature
CLASS_TEXTURE = {
    PartClass.HEAD: (None, None),
    PartClass.TORSO: (16.0, (0.0, 1.0)),
    PartClass.UPPER_ARMS: (8.0, (1.0, 0.0)),
    PartClass.LOWER_ARMS: (8.0, (0.0, 1.0)),
    PartClass.UPPER_LEGS: (16.0, (1.0, 0.0)),
    PartClass.LOWER_LEGS: (10.0, (1.0, 0.0)),
}
STRIPE_AMP = 0.28


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 384
    min_instances: int = 1
    max_instances: int = 4
    min_scale: float = 44.0
    max_scale: float = 360.0
    truncation_probability: float = 0.25
    clutter: int = 6
    noise_sigma: float = 0.03

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if not (16.0 <= self.min_scale <= self.max_scale):
            raise ValueError("need 16 <= min_scale <= max_scale")
        if self.max_scale > self.image_size:
            raise ValueError(
                "max_scale exceeds the image: untruncated figures cannot fit"
            )
        if not (0 <= self.min_instances <= self.max_instances):
            raise ValueError("bad instance count range")
        if not (0.0 <= self.truncation_probability <= 1.0):
            raise ValueError("truncation_probability must be in [0, 1]")
        if self.clutter < 0 or self.noise_sigma < 0:
            raise ValueError("clutter and noise_sigma must be >= 0")


@dataclass(frozen=True)
class FigureSpec:
    """Sampled pose: anchor is the top-center of the (full) body."""

    anchor: tuple[float, float]
    scale: float
    joint_angles: tuple[float, ...]  # l/r upper+lower arm, l/r upper+lower leg
    truncated: bool
    visible_fraction: float  # of the body scale; 1.0 when untruncated
    phase: float
    tint_scale: float


@dataclass(frozen=True)
class SceneSample:
    image: Grid2D
    gt_parts: LabelMap
    instance_masks: list
    instance_boxes: list

    def __post_init__(self):
        if self.image.channels != 3:
            raise ValueError("scene image must have 3 channels")
        if (self.image.width, self.image.height) != (self.gt_parts.width, self.gt_parts.height):
            raise ValueError("image and label sizes differ")
        if len(self.instance_masks) != len(self.instance_boxes):
            raise ValueError("masks and boxes must pair up")
        cover = np.zeros((self.gt_parts.height, self.gt_parts.width))
        for m, b in zip(self.instance_masks, self.instance_boxes):
            mv = m.values[:, :, 0]
            if not mv.any():
                raise ValueError("instance masks must be non-empty")
            cover += mv
            tight = AbsBox.from_mask(mv)
            if tight != b:
                raise ValueError(f"instance box {b} is not tight (expected {tight})")
        if cover.max() > 1.0:
            raise ValueError("instance masks overlap")
        if not np.array_equal(cover > 0, self.gt_parts.labels > 0):
            raise ValueError("labels and instance masks disagree")


# ---------------------------------------------------------------------------
# figure geometry


def _sample_figure(rng, cfg: SceneConfig) -> FigureSpec:
    log_s = rng.uniform(math.log(cfg.min_scale), math.log(cfg.max_scale))
    s = math.exp(log_s)
    truncated = bool(rng.random() < cfg.truncation_probability)
    # arm spread is kept moderate-to-wide so sqrt(box area) tracks the scale
    ang = []
    for _ in range(2):  # left, right arm
        ua = rng.uniform(math.radians(35), math.radians(65))
        la = ua + rng.uniform(math.radians(-10), math.radians(20))
        ang += [ua, la]
    for _ in range(2):  # left, right leg
        ul = rng.uniform(math.radians(4), math.radians(22))
        ll = ul + rng.uniform(math.radians(-8), math.radians(8))
        ang += [ul, ll]

    h = w = cfg.image_size
    half_w = 0.52 * s
    x = rng.uniform(min(half_w, w / 2), max(w - half_w, w / 2))
    if truncated:
        v = rng.uniform(0.40, 0.66)
        y = h - v * s
    else:
        v = 1.0
        y = rng.uniform(0.0, max(h - s, 0.0))
    return FigureSpec(
        anchor=(x, y),
        scale=s,
        joint_angles=tuple(ang),
        truncated=truncated,
        visible_fraction=v,
        phase=rng.uniform(0, 2 * math.pi),
        tint_scale=rng.uniform(0.9, 1.1),
    )


def _figure_parts(fig: FigureSpec):
    """Capsules as (class, p0, p1, radius) in painter's order (back first)."""
    s = fig.scale
    ax, ay = fig.anchor
    l_ua, l_la, r_ua, r_la, l_ul, l_ll, r_ul, r_ll = fig.joint_angles

    def down(p, length, theta, side):
        # theta from vertical-down, swung outward by side = -1 (left) / +1
        return (p[0] + side * length * math.sin(theta), p[1] + length * math.cos(theta))

    parts = []
    for side, ul, ll in ((-1, l_ul, l_ll), (1, r_ul, r_ll)):
        hip = (ax + side * 0.035 * s, ay + 0.54 * s)
        knee = down(hip, 0.22 * s, ul, side)
        ankle = down(knee, 0.24 * s, ll, side)
        parts.append((PartClass.UPPER_LEGS, hip, knee, 0.045 * s))
        parts.append((PartClass.LOWER_LEGS, knee, ankle, 0.04 * s))
    for side, ua, la in ((-1, l_ua, l_la), (1, r_ua, r_la)):
        shoulder = (ax + side * 0.06 * s, ay + 0.22 * s)
        elbow = down(shoulder, 0.20 * s, ua, side)
        wrist = down(elbow, 0.20 * s, la, side)
        parts.append((PartClass.UPPER_ARMS, shoulder, elbow, 0.03 * s))
        parts.append((PartClass.LOWER_ARMS, elbow, wrist, 0.03 * s))
    parts.append((PartClass.TORSO, (ax, ay + 0.23 * s), (ax, ay + 0.45 * s), 0.07 * s))
    head = (ax, ay + 0.08 * s)
    parts.append((PartClass.HEAD, head, head, 0.08 * s))
    return parts


# ---------------------------------------------------------------------------
# rasterization


def _capsule_window(h, w, p0, p1, r):
    """Pixel window + boolean coverage of a thick segment; None if empty."""
    x_lo = max(0, math.floor(min(p0[0], p1[0]) - r - 1))
    x_hi = min(w, math.ceil(max(p0[0], p1[0]) + r + 2))
    y_lo = max(0, math.floor(min(p0[1], p1[1]) - r - 1))
    y_hi = min(h, math.ceil(max(p0[1], p1[1]) + r + 2))
    if x_lo >= x_hi or y_lo >= y_hi:
        return None
    yy, xx = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    vv = vx * vx + vy * vy
    if vv == 0:
        dx, dy = xx - p0[0], yy - p0[1]
    else:
        t = np.clip(((xx - p0[0]) * vx + (yy - p0[1]) * vy) / vv, 0.0, 1.0)
        dx = xx - (p0[0] + t * vx)
        dy = yy - (p0[1] + t * vy)
    hit = dx * dx + dy * dy <= r * r
    if not hit.any():
        return None
    return (slice(y_lo, y_hi), slice(x_lo, x_hi)), xx, yy, hit


def _stripe_shade(xx, yy, lam, normal, phase, amp):
    if lam is None or normal is None or amp == 0.0:
        return np.ones_like(xx, dtype=float)
    arg = 2.0 * math.pi * (normal[0] * xx + normal[1] * yy) / lam + phase
    return 1.0 + amp * np.sin(arg)


def _paint(img, win, hit, colors):
    region = img[win[0], win[1]]
    region[hit] = colors[hit]
    img[win[0], win[1]] = region


def _draw_figure(img, labels, owner, fig: FigureSpec, inst_id: int):
    h, w, _ = img.shape
    for cls, p0, p1, r in _figure_parts(fig):
        cw = _capsule_window(h, w, p0, p1, r)
        if cw is None:
            continue
        win, xx, yy, hit = cw
        lam0, normal = CLASS_TEXTURE[cls]
        lam = None if lam0 is None else max(lam0 * fig.scale / CANONICAL_SCALE, 1e-6)
        shade = _stripe_shade(xx, yy, lam, normal, fig.phase, STRIPE_AMP)
        tint = HEAD_TINT if cls is PartClass.HEAD else BODY_TINT
        colors = np.clip(tint * fig.tint_scale * shade[:, :, None], 0.0, 1.0)
        _paint(img, win, hit, colors)
        region = labels[win[0], win[1]]
        region[hit] = int(cls)
        labels[win[0], win[1]] = region
        region = owner[win[0], win[1]]
        region[hit] = inst_id
        owner[win[0], win[1]] = region


def _draw_distractor(img, rng):
    h, w, _ = img.shape
    length = rng.uniform(10, 70)
    r = rng.uniform(3, 12)
    x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
    theta = rng.uniform(0, 2 * math.pi)
    p1 = (x0 + length * math.cos(theta), y0 + length * math.sin(theta))
    cw = _capsule_window(h, w, (x0, y0), p1, r)
    tint = rng.uniform(0.25, 0.8, size=3)
    lam = rng.uniform(6, 18)
    phase = rng.uniform(0, 2 * math.pi)
    plain = rng.random() < 0.4
    if cw is None:
        return
    win, xx, yy, hit = cw
    d = math.sqrt(0.5)
    shade = _stripe_shade(xx, yy, None if plain else lam, (d, d), phase, STRIPE_AMP)
    colors = np.clip(tint * shade[:, :, None], 0.0, 1.0)
    _paint(img, win, hit, colors)


def _background(rng, h, w):
    base = rng.uniform(0.35, 0.55, size=3)
    img = np.broadcast_to(base, (h, w, 3)).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(3):
        lam = rng.uniform(80, 240)
        theta = rng.uniform(0, math.pi)
        amp = rng.uniform(0.02, 0.06)
        ph = rng.uniform(0, 2 * math.pi)
        wave = amp * np.sin(
            2 * math.pi * (math.cos(theta) * xx + math.sin(theta) * yy) / lam + ph
        )
        img += wave[:, :, None]
    return img


# ---------------------------------------------------------------------------
# scenes and datasets


def generate_scene(seed, cfg: SceneConfig) -> SceneSample:
    """Render one scene; bit-identical for the same (seed, cfg)."""
    rng = np.random.default_rng(seed)
    h = w = cfg.image_size
    img = _background(rng, h, w)
    labels = np.zeros((h, w), dtype=np.int32)
    owner = np.full((h, w), -1, dtype=np.int32)

    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    figs = [_sample_figure(rng, cfg) for _ in range(n)]
    n_clutter = int(rng.integers(0, cfg.clutter + 1)) if cfg.clutter else 0
    for _ in range(n_clutter):
        _draw_distractor(img, rng)
    for i, fig in enumerate(figs):
        _draw_figure(img, labels, owner, fig, i)

    img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)

    masks, boxes = [], []
    for i in range(n):
        mv = (owner == i).astype(float)
        if not mv.any():
            continue  # fully occluded figure leaves no instance
        masks.append(Grid2D(mv[:, :, None]))
        boxes.append(AbsBox.from_mask(mv))
    return SceneSample(
        image=Grid2D(np.ascontiguousarray(img)),
        gt_parts=LabelMap(labels, NUM_CLASSES),
        instance_masks=masks,
        instance_boxes=boxes,
    )


def scene_seed(seed, index) -> np.random.SeedSequence:
    """Independent per-scene sub-seed; index i of any run of the same base
    seed always yields the same scene."""
    return np.random.SeedSequence(seed, spawn_key=(index,))


def generate_dataset(seed, cfg: SceneConfig, n: int):
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_scene(scene_seed(seed, i), cfg) for i in range(n)]


# ---------------------------------------------------------------------------
# on-disk layout


def _manifest_lines(samples, header: dict):
    lines = ["# autozoom-synth v1"]
    for k, v in header.items():
        lines.append(f"# {k} {v}")
    for i, s in enumerate(samples):
        for j, b in enumerate(s.instance_boxes):
            lines.append(f"{i:05d}_{j:02d} {b.x_min:.6f} {b.y_min:.6f} {b.w:.6f} {b.h:.6f}")
    return lines


def save_dataset(dirpath, samples, cfg: SceneConfig | None = None, seed=None) -> None:
    """img/gt/inst PNGs plus a manifest of instance boxes (config echoed in
    its header comments)."""
    os.makedirs(dirpath, exist_ok=True)
    header = {}
    if cfg is not None:
        for name in cfg.__dataclass_fields__:
            header[name] = getattr(cfg, name)
    if seed is not None:
        header["seed"] = seed
    header["count"] = len(samples)
    for i, s in enumerate(samples):
        save_image(s.image, os.path.join(dirpath, f"img_{i:05d}.png"))
        save_labels(s.gt_parts, os.path.join(dirpath, f"gt_{i:05d}.png"))
        for j, m in enumerate(s.instance_masks):
            save_image(m, os.path.join(dirpath, f"inst_{i:05d}_{j:02d}.png"))
    text = "\n".join(_manifest_lines(samples, header)) + "\n"
    atomic_write_bytes(os.path.join(dirpath, "manifest.txt"), text.encode())


def load_dataset(dirpath):
    """Rebuild samples from the on-disk layout (images come back quantized
    to 8 bits; labels, masks, and boxes are exact)."""
    manifest = os.path.join(dirpath, "manifest.txt")
    boxes_by_scene: dict[int, list] = {}
    with open(manifest, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            ident, x, y, w, h = line.split()
            m = re.fullmatch(r"(\d{5})_(\d{2})", ident)
            if not m:
                raise ValueError(f"{manifest}: bad instance id {ident!r}")
            i, j = int(m.group(1)), int(m.group(2))
            boxes_by_scene.setdefault(i, [])
            if j != len(boxes_by_scene[i]):
                raise ValueError(f"{manifest}: instance ids out of order at {ident}")
            boxes_by_scene[i].append(AbsBox(float(x), float(y), float(w), float(h)))

    names = sorted(f for f in os.listdir(dirpath) if re.fullmatch(r"img_\d{5}\.png", f))
    samples = []
    for name in names:
        i = int(name[4:9])
        img = load_image(os.path.join(dirpath, name))
        gt = load_labels(os.path.join(dirpath, f"gt_{i:05d}.png"), NUM_CLASSES)
        masks = []
        for j in range(len(boxes_by_scene.get(i, []))):
            masks.append(load_image(os.path.join(dirpath, f"inst_{i:05d}_{j:02d}.png")))
        samples.append(
            SceneSample(
                image=img,
                gt_parts=gt,
                instance_masks=masks,
                instance_boxes=boxes_by_scene.get(i, []),
            )
        )
    return samples
