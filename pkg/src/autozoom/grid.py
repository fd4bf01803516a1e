"""Dense 2D multi-channel grids, label maps and boxes.

Everything downstream (scene synthesis, the scorer, zooming, merging,
evaluation) operates on the types defined here. Grids are immutable after
construction and all operations are pure functions, so values can be shared
freely across workers.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image


class Grid2D:
    """A width x height x channels grid of finite float64 values.

    The backing array is row-major and channel-interleaved (shape H, W, C)
    and is marked read-only once the grid is built.
    """

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"grid needs shape (H, W, C), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("grid values must be finite")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        self._values = arr

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def width(self) -> int:
        return self._values.shape[1]

    @property
    def height(self) -> int:
        return self._values.shape[0]

    @property
    def channels(self) -> int:
        return self._values.shape[2]

    def channel(self, i: int) -> np.ndarray:
        return self._values[:, :, i]

    def __eq__(self, other):
        return isinstance(other, Grid2D) and np.array_equal(self._values, other._values)

    def __repr__(self):
        return f"{type(self).__name__}({self.width}x{self.height}x{self.channels})"


class ScoreMap(Grid2D):
    """Grid whose channels are per-class scores; channel 0 is background.

    When ``normalized`` is set the per-pixel channel sums must be 1 within
    1e-5 and every entry must lie in [0, 1].
    """

    __slots__ = ("normalized",)

    def __init__(self, values: np.ndarray, normalized: bool = False):
        super().__init__(values)
        if normalized:
            v = self.values
            sums = v.sum(axis=2)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise ValueError("normalized score map has per-pixel sums off by > 1e-5")
            if v.min() < -1e-12 or v.max() > 1.0 + 1e-12:
                raise ValueError("normalized score map has entries outside [0, 1]")
        self.normalized = bool(normalized)


class LabelMap:
    """Per-pixel integer class ids in [0, num_classes)."""

    __slots__ = ("_labels", "num_classes")

    def __init__(self, labels: np.ndarray, num_classes: int):
        arr = np.asarray(labels)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"label map needs shape (H, W), got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError("labels must be integers")
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError("label outside [0, num_classes)")
        arr = np.ascontiguousarray(arr.astype(np.int32))
        arr.flags.writeable = False
        self._labels = arr
        self.num_classes = int(num_classes)

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def width(self) -> int:
        return self._labels.shape[1]

    @property
    def height(self) -> int:
        return self._labels.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, LabelMap)
            and self.num_classes == other.num_classes
            and np.array_equal(self._labels, other._labels)
        )


@dataclass(frozen=True)
class AbsBox:
    """Axis-aligned box in absolute pixel coordinates (w, h > 0)."""

    x_min: float
    y_min: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")

    @property
    def x_max(self) -> float:
        return self.x_min + self.w

    @property
    def y_max(self) -> float:
        return self.y_min + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.w / 2.0, self.y_min + self.h / 2.0)

    def pixel_rect(self) -> tuple[int, int, int, int]:
        """Integer pixel rectangle (x0, y0, x1, y1) rounded outward."""
        x0 = int(np.floor(self.x_min))
        y0 = int(np.floor(self.y_min))
        x1 = int(np.ceil(self.x_max))
        y1 = int(np.ceil(self.y_max))
        # a box thinner than one pixel still covers the pixel it sits on
        if x1 <= x0:
            x1 = x0 + 1
        if y1 <= y0:
            y1 = y0 + 1
        return x0, y0, x1, y1

    def iou(self, other: "AbsBox") -> float:
        ix = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        iy = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area + other.area - inter)

    def clip_to(self, width: int, height: int) -> "AbsBox | None":
        """Intersect with the image rectangle; None when nothing remains."""
        x0 = max(self.x_min, 0.0)
        y0 = max(self.y_min, 0.0)
        x1 = min(self.x_max, float(width))
        y1 = min(self.y_max, float(height))
        if x1 - x0 < 1e-9 or y1 - y0 < 1e-9:
            return None
        return AbsBox(x0, y0, x1 - x0, y1 - y0)

    @staticmethod
    def from_mask(mask: np.ndarray) -> "AbsBox | None":
        """Tight box around the nonzero pixels of a 2D mask."""
        ys, xs = np.nonzero(mask)
        if ys.size == 0:
            return None
        return AbsBox(
            float(xs.min()), float(ys.min()),
            float(xs.max() - xs.min() + 1), float(ys.max() - ys.min() + 1),
        )


# ---------------------------------------------------------------------------
# operations

def bilinear_resize(g: Grid2D, out_w: int, out_h: int) -> Grid2D:
    """Resize with bilinear interpolation (center-based sample mapping).

    Output pixel centers map to source coordinates via
    src = (dst + 0.5) * scale - 0.5, clamped to the source rectangle. The
    result is clipped to the local min/max of the four contributing samples,
    which keeps constants exact and the output within the input range.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be >= 1, got {out_w}x{out_h}")
    src = g.values
    xs = np.clip((np.arange(out_w) + 0.5) * (g.width / out_w) - 0.5, 0.0, g.width - 1.0)
    ys = np.clip((np.arange(out_h) + 0.5) * (g.height / out_h) - 0.5, 0.0, g.height - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, g.width - 1)
    y1 = np.minimum(y0 + 1, g.height - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]

    ia = src[y0[:, None], x0[None, :]]
    ib = src[y1[:, None], x0[None, :]]
    ic = src[y0[:, None], x1[None, :]]
    id_ = src[y1[:, None], x1[None, :]]

    out = (
        (1.0 - fy) * (1.0 - fx) * ia
        + fy * (1.0 - fx) * ib
        + (1.0 - fy) * fx * ic
        + fy * fx * id_
    )
    lo = np.minimum(np.minimum(ia, ib), np.minimum(ic, id_))
    hi = np.maximum(np.maximum(ia, ib), np.maximum(ic, id_))
    np.clip(out, lo, hi, out=out)
    if isinstance(g, ScoreMap):
        return ScoreMap(out, normalized=g.normalized)
    return Grid2D(out)


def crop(g: Grid2D, box: AbsBox) -> Grid2D:
    """Extract the pixel rectangle of ``box`` (rounded outward).

    Samples falling outside the grid replicate the nearest edge pixel.
    """
    if (
        box.x_min >= g.width or box.x_max <= 0
        or box.y_min >= g.height or box.y_max <= 0
    ):
        raise ValueError(f"box {box} lies fully outside {g.width}x{g.height} grid")
    x0, y0, x1, y1 = box.pixel_rect()
    xs = np.clip(np.arange(x0, x1), 0, g.width - 1)
    ys = np.clip(np.arange(y0, y1), 0, g.height - 1)
    out = g.values[np.ix_(ys, xs)]
    if isinstance(g, ScoreMap):
        return ScoreMap(out, normalized=g.normalized)
    return Grid2D(out)


def crop_labels(lm: LabelMap, box: AbsBox) -> LabelMap:
    """Label-map analogue of :func:`crop` (edge-clamped integer rectangle)."""
    if (
        box.x_min >= lm.width or box.x_max <= 0
        or box.y_min >= lm.height or box.y_max <= 0
    ):
        raise ValueError(f"box {box} lies fully outside {lm.width}x{lm.height} labels")
    x0, y0, x1, y1 = box.pixel_rect()
    xs = np.clip(np.arange(x0, x1), 0, lm.width - 1)
    ys = np.clip(np.arange(y0, y1), 0, lm.height - 1)
    return LabelMap(lm.labels[np.ix_(ys, xs)], lm.num_classes)


def softmax_channels(logits: Grid2D) -> ScoreMap:
    """Per-pixel softmax over channels (max-subtracted for stability)."""
    if logits.channels < 2:
        raise ValueError("softmax needs at least 2 channels")
    v = logits.values
    m = v.max(axis=2, keepdims=True)
    e = np.exp(v - m)
    p = e / e.sum(axis=2, keepdims=True)
    return ScoreMap(p, normalized=True)


def argmax_labels(s: Grid2D) -> LabelMap:
    """Per-pixel index of the maximum channel; ties go to the lowest index."""
    return LabelMap(np.argmax(s.values, axis=2).astype(np.int32), s.channels)


def resize_labels(lm: LabelMap, out_w: int, out_h: int) -> LabelMap:
    """Nearest-neighbor label resize under the same center mapping as
    :func:`bilinear_resize` (labels cannot be blended)."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be >= 1, got {out_w}x{out_h}")
    xs = np.clip(
        np.round((np.arange(out_w) + 0.5) * (lm.width / out_w) - 0.5).astype(np.intp),
        0, lm.width - 1,
    )
    ys = np.clip(
        np.round((np.arange(out_h) + 0.5) * (lm.height / out_h) - 0.5).astype(np.intp),
        0, lm.height - 1,
    )
    return LabelMap(lm.labels[np.ix_(ys, xs)], lm.num_classes)


# ---------------------------------------------------------------------------
# file formats

SCORE_MAP_MAGIC = b"HZS1"


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write a file atomically (temp file in the same dir, then rename)."""
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_image(path: str) -> Grid2D:
    """Read an 8-bit PNG (grayscale or RGB) as reals in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return Grid2D(arr)


def save_image(g: Grid2D, path: str) -> None:
    if g.channels not in (1, 3):
        raise ValueError(f"image write needs 1 or 3 channels, got {g.channels}")
    arr = np.clip(np.round(g.values * 255.0), 0, 255).astype(np.uint8)
    if g.channels == 1:
        im = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        im = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_labels(path: str, num_classes: int) -> LabelMap:
    """Read a single-channel 8-bit PNG whose pixel values are class ids."""
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        arr = np.asarray(im, dtype=np.int32)
    return LabelMap(arr, num_classes)


def save_labels(lm: LabelMap, path: str) -> None:
    if lm.num_classes > 256:
        raise ValueError("8-bit label PNG supports at most 256 classes")
    im = Image.fromarray(lm.labels.astype(np.uint8), mode="L")
    import io

    buf = io.BytesIO()
    im.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_score_map(s: Grid2D, path: str) -> None:
    """Binary score-map container: magic, u32le w/h/c, f32le samples."""
    header = SCORE_MAP_MAGIC + struct.pack("<III", s.width, s.height, s.channels)
    payload = s.values.astype("<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_score_map(path: str) -> ScoreMap:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != SCORE_MAP_MAGIC:
        raise ValueError(f"{path}: bad score-map magic {data[:4]!r}")
    w, h, c = struct.unpack_from("<III", data, 4)
    expect = 16 + w * h * c * 4
    if len(data) != expect:
        raise ValueError(f"{path}: truncated score map ({len(data)} != {expect} bytes)")
    arr = np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c)
    return ScoreMap(arr.astype(np.float64), normalized=False)
