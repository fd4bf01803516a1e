"""Per-pixel predictor: fixed filter-bank features + three linear heads.

The feature bank is hand-fixed (no learned convolutions): raw color, luma,
oriented second-difference stripe energies at several offsets, box means at
several radii, and smoothed gradient magnitude. Its receptive radius is
deliberately small and fixed, so prediction quality depends strongly on how
large structures appear in the input — which is exactly the sensitivity the
zoom cascade is built to exploit.

Three linear heads read each pixel's feature vector: part-class logits, a
scale-confidence logit, and a 4-channel box regression. Training is classic
minibatch SGD with momentum and weight decay under the joint loss
(part cross-entropy + seed/regression loss).
"""

from __future__ import annotations

import base64
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Grid2D, LabelMap, ScoreMap, atomic_write_bytes
from .sen import SenLossConfig, SenTargets, sen_loss

RECEPTIVE_RADIUS = 16
STRIPE_OFFSETS = (2, 4, 8)
STRIPE_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))  # 0, 45, 90, 135 degrees
MEAN_RADII = (2, 4, 8, 16)

FEATURE_NAMES = (
    ["r", "g", "b", "luma"]
    + [f"stripe_o{o}_d{d}" for o in STRIPE_OFFSETS for d in (0, 45, 90, 135)]
    + [f"mean_r{r}" for r in MEAN_RADII]
    + ["gradmag_r2"]
)
F_BASE = len(FEATURE_NAMES)

# fixed standardization constants, one (offset, scale) per base channel;
# chosen once from the typical dynamic range of synthetic scenes and frozen
FEATURE_OFFSETS = (
    0.5, 0.5, 0.5, 0.5,
    0.05, 0.05, 0.05, 0.05,
    0.05, 0.05, 0.05, 0.05,
    0.05, 0.05, 0.05, 0.05,
    0.5, 0.5, 0.5, 0.5,
    0.05,
)
FEATURE_SCALES = (
    0.15, 0.15, 0.15, 0.15,
    0.12, 0.12, 0.12, 0.12,
    0.12, 0.12, 0.12, 0.12,
    0.12, 0.12, 0.12, 0.12,
    0.1, 0.09, 0.075, 0.065,
    0.05,
)
PRIOR_OFFSET = 1.0 / 7.0
PRIOR_SCALE = 0.35

MODEL_MAGIC = "autozoom-scorer v1"


@dataclass(frozen=True)
class FeatureStack:
    """Standardized per-pixel features; ``num_prior`` trailing channels are
    prior class scores (0 when the stage takes none)."""

    grid: Grid2D
    num_prior: int = 0
    receptive_radius: int = RECEPTIVE_RADIUS

    def __post_init__(self):
        if self.grid.channels != F_BASE + self.num_prior:
            raise ValueError(
                f"expected {F_BASE + self.num_prior} channels, got {self.grid.channels}"
            )

    @property
    def num_features(self) -> int:
        return self.grid.channels


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """a sampled at (y+dy, x+dx) with border clamping."""
    h, w = a.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return a[np.ix_(ys, xs)]


def _box_mean(a: np.ndarray, radius: int) -> np.ndarray:
    return ndimage.uniform_filter(a, size=2 * radius + 1, mode="nearest")


def extract_features(img: Grid2D, prior_scores: ScoreMap | None = None) -> FeatureStack:
    """Compute the fixed filter bank, standardized by the frozen constants.

    Deterministic and translation-equivariant away from borders. Prior
    scores, when given, are appended as extra standardized channels.
    """
    if img.channels != 3:
        raise ValueError("feature extraction expects an RGB image")
    if prior_scores is not None and (
        prior_scores.width != img.width or prior_scores.height != img.height
    ):
        raise ValueError("prior scores must match the image size")

    v = img.values
    luma = 0.299 * v[:, :, 0] + 0.587 * v[:, :, 1] + 0.114 * v[:, :, 2]

    chans = [v[:, :, 0], v[:, :, 1], v[:, :, 2], luma]
    for o in STRIPE_OFFSETS:
        for dy, dx in STRIPE_DIRECTIONS:
            sd = _shift(luma, dy * o, dx * o) - 2.0 * luma + _shift(luma, -dy * o, -dx * o)
            chans.append(_box_mean(sd * sd, o))
    for r in MEAN_RADII:
        chans.append(_box_mean(luma, r))
    gx = (_shift(luma, 0, 1) - _shift(luma, 0, -1)) / 2.0
    gy = (_shift(luma, 1, 0) - _shift(luma, -1, 0)) / 2.0
    chans.append(_box_mean(np.sqrt(gx * gx + gy * gy), 2))

    stack = np.stack(chans, axis=2)
    stack = (stack - np.array(FEATURE_OFFSETS)) / np.array(FEATURE_SCALES)

    num_prior = 0
    if prior_scores is not None:
        num_prior = prior_scores.channels
        pri = (prior_scores.values - PRIOR_OFFSET) / PRIOR_SCALE
        stack = np.concatenate([stack, pri], axis=2)
    return FeatureStack(grid=Grid2D(np.ascontiguousarray(stack)), num_prior=num_prior)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ScorerParams:
    """Weights of the three linear heads over an F-dim feature vector."""

    w_parts: np.ndarray  # (F, C)
    b_parts: np.ndarray  # (C,)
    w_conf: np.ndarray  # (F,)
    b_conf: float
    w_reg: np.ndarray  # (F, 4)
    b_reg: np.ndarray  # (4,)
    num_prior: int = 0

    def __post_init__(self):
        f, c = self.w_parts.shape
        if self.num_prior not in (0, c):
            raise ValueError("prior width must be 0 or the class count")
        if self.b_parts.shape != (c,) or self.w_conf.shape != (f,):
            raise ValueError("head shapes are inconsistent")
        if self.w_reg.shape != (f, 4) or self.b_reg.shape != (4,):
            raise ValueError("head shapes are inconsistent")
        for a in (self.w_parts, self.b_parts, self.w_conf, self.w_reg, self.b_reg):
            if not np.isfinite(a).all():
                raise ValueError("parameters must be finite")
        if not math.isfinite(self.b_conf):
            raise ValueError("parameters must be finite")

    @property
    def num_features(self) -> int:
        return self.w_parts.shape[0]

    @property
    def num_classes(self) -> int:
        return self.w_parts.shape[1]

    @staticmethod
    def zeros(num_features: int, num_classes: int, num_prior: int = 0) -> "ScorerParams":
        return ScorerParams(
            w_parts=np.zeros((num_features, num_classes)),
            b_parts=np.zeros(num_classes),
            w_conf=np.zeros(num_features),
            b_conf=0.0,
            w_reg=np.zeros((num_features, 4)),
            b_reg=np.zeros(4),
            num_prior=num_prior,
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate(
            [
                self.w_parts.ravel(),
                self.b_parts,
                self.w_conf,
                [self.b_conf],
                self.w_reg.ravel(),
                self.b_reg,
            ]
        )

    @staticmethod
    def from_vector(
        vec: np.ndarray, num_features: int, num_classes: int, num_prior: int = 0
    ) -> "ScorerParams":
        f, c = num_features, num_classes
        sizes = [f * c, c, f, 1, f * 4, 4]
        if vec.shape != (sum(sizes),):
            raise ValueError(f"expected {sum(sizes)} parameters, got {vec.shape}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        return ScorerParams(
            w_parts=parts[0].reshape(f, c),
            b_parts=parts[1].copy(),
            w_conf=parts[2].copy(),
            b_conf=float(parts[3][0]),
            w_reg=parts[4].reshape(f, 4),
            b_reg=parts[5].copy(),
            num_prior=num_prior,
        )

    @staticmethod
    def bias_mask(num_features: int, num_classes: int) -> np.ndarray:
        """True at the bias slots of the flattened parameter vector."""
        f, c = num_features, num_classes
        mask = np.zeros(f * c + c + f + 1 + f * 4 + 4, dtype=bool)
        mask[f * c : f * c + c] = True
        mask[f * c + c + f] = True
        mask[-4:] = True
        return mask


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    classifier_lr_multiplier: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch: int = 30
    lr_decay_every: int = 2000
    lr_decay_factor: float = 0.1
    iterations: int = 2000

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.batch < 1 or self.iterations < 0:
            raise ValueError("batch and iterations must be positive")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 0-based iteration index."""
        return self.lr * self.lr_decay_factor ** (iteration // self.lr_decay_every)


# ---------------------------------------------------------------------------
# forward + losses


def forward(p: ScorerParams, f: FeatureStack):
    """Per-pixel affine heads: (part logits, confidence logit, regression)."""
    if f.num_features != p.num_features:
        raise ValueError(
            f"feature width {f.num_features} does not match params {p.num_features}"
        )
    feats = f.grid.values
    part_logits = feats @ p.w_parts + p.b_parts
    conf = feats @ p.w_conf[:, None] + p.b_conf
    reg = feats @ p.w_reg + p.b_reg
    return Grid2D(part_logits), Grid2D(conf), Grid2D(reg)


def part_loss(part_logits: Grid2D, gt: LabelMap):
    """Mean per-pixel cross-entropy of the softmax against the labels.

    Returns (loss, gradient w.r.t. the logits).
    """
    if (part_logits.height, part_logits.width) != (gt.height, gt.width):
        raise ValueError("logit and label sizes differ")
    if part_logits.channels != gt.num_classes:
        raise ValueError("logit channels must equal the class count")
    x = part_logits.values
    m = x.max(axis=2, keepdims=True)
    lse = m[:, :, 0] + np.log(np.exp(x - m).sum(axis=2))
    yy, xx = np.indices(gt.labels.shape)
    true_logit = x[yy, xx, gt.labels]
    n = gt.labels.size
    loss = float((lse - true_logit).sum()) / n

    soft = np.exp(x - lse[:, :, None])
    onehot = np.zeros_like(x)
    onehot[yy, xx, gt.labels] = 1.0
    grad = (soft - onehot) / n
    return loss, Grid2D(grad)


def azn_loss(
    p: ScorerParams,
    f: FeatureStack,
    gt: LabelMap,
    tgt: SenTargets,
    cfg: SenLossConfig,
):
    """Joint loss (part cross-entropy + seed/box loss) and its exact
    gradient with respect to every parameter of the heads."""
    part_logits, conf, reg = forward(p, f)
    lp, g_logits = part_loss(part_logits, gt)
    ls, g_conf, g_reg = sen_loss(conf, reg, tgt, cfg)

    feats = f.grid.values
    grads = ScorerParams(
        w_parts=np.einsum("hwf,hwc->fc", feats, g_logits.values),
        b_parts=g_logits.values.sum(axis=(0, 1)),
        w_conf=np.einsum("hwf,hw->f", feats, g_conf.values[:, :, 0]),
        b_conf=float(g_conf.values.sum()),
        w_reg=np.einsum("hwf,hwc->fc", feats, g_reg.values),
        b_reg=g_reg.values.sum(axis=(0, 1)),
        num_prior=p.num_prior,
    )
    return lp + ls, grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSample:
    """One training crop: image, optional prior scores, labels, box targets."""

    image: Grid2D
    prior: ScoreMap | None
    gt: LabelMap
    sen: SenTargets


def sgd_step(
    vec: np.ndarray,
    vel: np.ndarray,
    grad: np.ndarray,
    lr: float,
    bias_mask: np.ndarray,
    cfg: TrainConfig,
) -> None:
    """One in-place momentum/weight-decay update of the parameter vector."""
    vel *= cfg.momentum
    vel += grad + cfg.weight_decay * vec
    lr_eff = np.where(bias_mask, lr * cfg.classifier_lr_multiplier, lr)
    vec -= lr_eff * vel


def sgd_train(
    data: list[TrainSample],
    cfg: TrainConfig,
    seed: int,
    loss_csv_path=None,
    sen_cfg: SenLossConfig | None = None,
) -> ScorerParams:
    """Minibatch SGD from zero initialization; deterministic given the seed.

    Emits one `iter,loss,lr` row per iteration when a CSV path is given.
    Aborts with a diagnostic if the loss stops being finite.
    """
    if not data:
        raise ValueError("training data must be non-empty")
    if sen_cfg is None:
        sen_cfg = SenLossConfig()

    feats = [extract_features(s.image, s.prior) for s in data]
    num_f = feats[0].num_features
    num_c = data[0].gt.num_classes
    num_p = feats[0].num_prior
    for fs in feats:
        if fs.num_features != num_f:
            raise ValueError("all samples must produce the same feature width")

    params = ScorerParams.zeros(num_f, num_c, num_p)
    vec = params.as_vector()
    vel = np.zeros_like(vec)
    mask = ScorerParams.bias_mask(num_f, num_c)

    rng = np.random.default_rng(seed)
    stream: list[int] = []
    rows = []
    for it in range(cfg.iterations):
        while len(stream) < cfg.batch:
            stream.extend(rng.permutation(len(data)).tolist())
        idxs, stream = stream[: cfg.batch], stream[cfg.batch :]

        params = ScorerParams.from_vector(vec, num_f, num_c, num_p)
        total = 0.0
        gsum = np.zeros_like(vec)
        for i in idxs:
            loss_i, grads = azn_loss(params, feats[i], data[i].gt, data[i].sen, sen_cfg)
            total += loss_i
            gsum += grads.as_vector()
        loss = total / len(idxs)
        if not math.isfinite(loss):
            raise RuntimeError(
                f"training diverged: loss became {loss} at iteration {it + 1}"
            )
        lr = cfg.lr_at(it)
        with np.errstate(over="ignore", invalid="ignore"):
            sgd_step(vec, vel, gsum / len(idxs), lr, mask, cfg)
        if not np.isfinite(vec).all():
            raise RuntimeError(
                f"training diverged: parameters became non-finite at iteration {it + 1}"
            )
        rows.append((it + 1, loss, lr))

    if loss_csv_path is not None:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["iter", "loss", "lr"])
        for it, loss, lr in rows:
            writer.writerow([it, f"{loss:.9g}", f"{lr:.9g}"])
        atomic_write_bytes(loss_csv_path, buf.getvalue().encode())

    return ScorerParams.from_vector(vec, num_f, num_c, num_p)


# ---------------------------------------------------------------------------
# model files


def save_params(p: ScorerParams, path) -> None:
    """Text header (layout + standardization constants) + base64 weights."""
    fb = F_BASE
    lines = [
        MODEL_MAGIC,
        f"f_base {fb}",
        f"num_classes {p.num_classes}",
        f"num_prior {p.num_prior}",
        f"receptive_radius {RECEPTIVE_RADIUS}",
        "feature_bank " + ",".join(FEATURE_NAMES),
        "standardize_offset " + " ".join(f"{v:.9g}" for v in FEATURE_OFFSETS),
        "standardize_scale " + " ".join(f"{v:.9g}" for v in FEATURE_SCALES),
        f"prior_standardize {PRIOR_OFFSET:.9g} {PRIOR_SCALE:.9g}",
        "params " + base64.b64encode(p.as_vector().astype("<f8").tobytes()).decode(),
        "",
    ]
    atomic_write_bytes(path, "\n".join(lines).encode())


def load_params(path) -> ScorerParams:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a scorer model file")
    fields = {}
    for ln in lines[1:]:
        key, _, rest = ln.partition(" ")
        fields[key] = rest
    try:
        fb = int(fields["f_base"])
        num_c = int(fields["num_classes"])
        num_p = int(fields["num_prior"])
        blob = base64.b64decode(fields["params"], validate=True)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed model file ({exc})") from exc
    if fb != F_BASE:
        raise ValueError(f"{path}: feature bank width {fb} != supported {F_BASE}")
    offs = tuple(float(t) for t in fields.get("standardize_offset", "").split())
    scls = tuple(float(t) for t in fields.get("standardize_scale", "").split())
    if offs != FEATURE_OFFSETS or scls != FEATURE_SCALES:
        raise ValueError(f"{path}: standardization constants differ from this build")
    vec = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    return ScorerParams.from_vector(vec, fb + num_p, num_c, num_p)
