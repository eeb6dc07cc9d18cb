"""Box algebra and anchor (prior box) machinery for single-shot detection.

Boxes live in two parametrizations: corner form (xmin, ymin, xmax, ymax)
and center-size form (cx, cy, w, h). Coordinates are normalized to the
unit square everywhere inside the library; pixel coordinates appear only
at I/O boundaries (dataset files, PPM frames).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

# Standard SSD encoding variances (center, size).
DEFAULT_VARIANCES = (0.1, 0.2)

# Decoded extents past this are treated as numeric overflow: a box a
# million image-widths wide is a garbage prediction, not a detection.
DECODE_EXTENT_CAP = 1e6


def _require_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} has non-finite coordinate {v!r}")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in corner form; xmin < xmax and ymin < ymax."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self) -> None:
        _require_finite("BoundingBox", self.xmin, self.ymin, self.xmax, self.ymax)
        if self.xmin >= self.xmax or self.ymin >= self.ymax:
            raise ValueError(
                f"degenerate box: ({self.xmin}, {self.ymin}, {self.xmax}, {self.ymax})"
            )

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class CenterBox:
    """Axis-aligned box in center-size form; w > 0 and h > 0."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        _require_finite("CenterBox", self.cx, self.cy, self.w, self.h)
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"non-positive extent: w={self.w}, h={self.h}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class BoxOffsets:
    """Dimensionless regression offsets of a box relative to an anchor."""

    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        _require_finite("BoxOffsets", self.tx, self.ty, self.tw, self.th)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


def to_center(b: BoundingBox) -> CenterBox:
    """Convert corner form to center-size form (exact bijection)."""
    return CenterBox(
        cx=(b.xmin + b.xmax) / 2.0,
        cy=(b.ymin + b.ymax) / 2.0,
        w=b.xmax - b.xmin,
        h=b.ymax - b.ymin,
    )


def to_corner(c: CenterBox) -> BoundingBox:
    """Convert center-size form to corner form (exact bijection)."""
    return BoundingBox(
        xmin=c.cx - c.w / 2.0,
        ymin=c.cy - c.h / 2.0,
        xmax=c.cx + c.w / 2.0,
        ymax=c.cy + c.h / 2.0,
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; symmetric, 0 when disjoint."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


@dataclass(frozen=True)
class AnchorConfig:
    """Hyperparameters of the anchor grid.

    ``aspect_ratios`` holds one tuple of ratios per feature map; passing a
    flat sequence of numbers applies the same ratios to every layer.
    """

    image_size: int = 160
    feature_map_sizes: tuple[int, ...] = (10, 5)
    aspect_ratios: tuple[tuple[float, ...], ...] = ((1.0, 2.0, 0.5), (1.0, 2.0, 0.5))
    s_min: float = 0.2
    s_max: float = 0.9
    add_extra_scale_box: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "feature_map_sizes", tuple(self.feature_map_sizes))
        ratios = tuple(self.aspect_ratios)
        if ratios and not isinstance(ratios[0], (tuple, list)):
            ratios = tuple(tuple(ratios) for _ in self.feature_map_sizes)
        else:
            ratios = tuple(tuple(r) for r in ratios)
        object.__setattr__(self, "aspect_ratios", ratios)

        if self.image_size < 1:
            raise ValueError(f"image_size must be >= 1, got {self.image_size}")
        if not self.feature_map_sizes:
            raise ValueError("feature_map_sizes must be non-empty")
        if any(f < 1 for f in self.feature_map_sizes):
            raise ValueError(f"feature map sizes must be positive: {self.feature_map_sizes}")
        if len(self.aspect_ratios) != len(self.feature_map_sizes):
            raise ValueError(
                f"{len(self.aspect_ratios)} ratio sets for "
                f"{len(self.feature_map_sizes)} feature maps"
            )
        if any(not rs for rs in self.aspect_ratios):
            raise ValueError("every layer needs at least one aspect ratio")
        if any(r <= 0 for rs in self.aspect_ratios for r in rs):
            raise ValueError(f"aspect ratios must be positive: {self.aspect_ratios}")
        if not (0.0 < self.s_min <= self.s_max <= 1.0):
            raise ValueError(f"need 0 < s_min <= s_max <= 1, got ({self.s_min}, {self.s_max})")

    def boxes_per_cell(self, layer: int) -> int:
        return len(self.aspect_ratios[layer]) + (1 if self.add_extra_scale_box else 0)

    def expected_count(self) -> int:
        """Closed-form anchor count: sum over layers of f_k^2 * b_k."""
        return sum(
            f * f * self.boxes_per_cell(k) for k, f in enumerate(self.feature_map_sizes)
        )

    def layer_scale(self, layer: int) -> float:
        """Linear scale interpolation from s_min to s_max across layers."""
        m = len(self.feature_map_sizes)
        return self.s_min + (self.s_max - self.s_min) * layer / max(m - 1, 1)


@dataclass(frozen=True)
class AnchorSet:
    """Ordered anchors in normalized center-size coordinates.

    Order is deterministic: layer-major, then row-major over grid cells,
    then ratio index within a cell (the extra geometric-mean box, when
    enabled, comes last in each cell). ``layout`` records (grid_size,
    boxes_per_cell) per layer for generated sets; ad-hoc sets built from
    raw boxes carry no layout.
    """

    boxes: np.ndarray  # (N, 4) float64: cx, cy, w, h
    layout: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self) -> None:
        boxes = np.asarray(self.boxes, dtype=np.float64)
        if boxes.ndim != 2 or boxes.shape[1] != 4:
            raise ValueError(f"anchor array must be (N, 4), got {boxes.shape}")
        if not np.all(np.isfinite(boxes)):
            raise ValueError("anchor boxes must be finite")
        if boxes.size and (np.any(boxes[:, :2] <= 0.0) or np.any(boxes[:, :2] >= 1.0)):
            raise ValueError("anchor centers must lie strictly inside (0, 1)")
        if boxes.size and np.any(boxes[:, 2:] <= 0.0):
            raise ValueError("anchor extents must be positive")
        object.__setattr__(self, "boxes", boxes)
        if self.layout is not None:
            n = sum(f * f * b for f, b in self.layout)
            if n != len(boxes):
                raise ValueError(f"layout implies {n} anchors, array has {len(boxes)}")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __getitem__(self, i: int) -> CenterBox:
        cx, cy, w, h = self.boxes[i]
        return CenterBox(cx, cy, w, h)

    def __iter__(self) -> Iterator[CenterBox]:
        for row in self.boxes:
            yield CenterBox(*row)

    @property
    def count(self) -> int:
        return len(self)

    @classmethod
    def from_boxes(cls, boxes: Sequence[CenterBox] | np.ndarray) -> "AnchorSet":
        """Build an ad-hoc anchor set (no grid layout) from center boxes."""
        if isinstance(boxes, np.ndarray):
            arr = boxes
        else:
            arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
        return cls(boxes=arr, layout=None)

    def cell_of(self, index: int) -> tuple[int, int, int, int]:
        """Map an anchor index to (layer, row, col, ratio_index)."""
        if self.layout is None:
            raise ValueError("anchor set has no grid layout")
        if not 0 <= index < len(self):
            raise IndexError(index)
        base = 0
        for layer, (f, b) in enumerate(self.layout):
            n_layer = f * f * b
            if index < base + n_layer:
                local = index - base
                cell, ratio = divmod(local, b)
                row, col = divmod(cell, f)
                return (layer, row, col, ratio)
            base += n_layer
        raise IndexError(index)  # unreachable


def generate_anchors(cfg: AnchorConfig) -> AnchorSet:
    """Tile anchors over every feature map grid per the config.

    Layer k (0-based, m layers) uses scale
    ``s_k = s_min + (s_max - s_min) * k / max(m - 1, 1)``; each cell (i, j)
    of an f x f grid centers its boxes at ((j + 0.5) / f, (i + 0.5) / f).
    Per aspect ratio r the box extent is (s_k * sqrt(r), s_k / sqrt(r));
    with the extra-scale flag an additional ratio-1 box of scale
    ``sqrt(s_k * s_{k+1})`` is appended (the scale past the last layer is
    defined as 1).
    """
    m = len(cfg.feature_map_sizes)
    rows = []
    layout = []
    for k, f in enumerate(cfg.feature_map_sizes):
        s_k = cfg.layer_scale(k)
        s_next = cfg.layer_scale(k + 1) if k + 1 < m else 1.0
        s_extra = math.sqrt(s_k * s_next)
        layout.append((f, cfg.boxes_per_cell(k)))
        for i in range(f):
            cy = (i + 0.5) / f
            for j in range(f):
                cx = (j + 0.5) / f
                for r in cfg.aspect_ratios[k]:
                    root = math.sqrt(r)
                    rows.append((cx, cy, s_k * root, s_k / root))
                if cfg.add_extra_scale_box:
                    rows.append((cx, cy, s_extra, s_extra))
    return AnchorSet(boxes=np.array(rows, dtype=np.float64), layout=tuple(layout))


def encode(
    gt: CenterBox,
    anchor: CenterBox,
    variances: tuple[float, float] = DEFAULT_VARIANCES,
) -> BoxOffsets:
    """Encode a ground-truth box as regression offsets from an anchor."""
    v_c, v_s = variances
    if v_c <= 0 or v_s <= 0:
        raise ValueError(f"variances must be positive, got {variances}")
    return BoxOffsets(
        tx=(gt.cx - anchor.cx) / (anchor.w * v_c),
        ty=(gt.cy - anchor.cy) / (anchor.h * v_c),
        tw=math.log(gt.w / anchor.w) / v_s,
        th=math.log(gt.h / anchor.h) / v_s,
    )


def decode(
    off: BoxOffsets,
    anchor: CenterBox,
    variances: tuple[float, float] = DEFAULT_VARIANCES,
) -> BoundingBox:
    """Invert :func:`encode` and return the box in corner form."""
    v_c, v_s = variances
    if v_c <= 0 or v_s <= 0:
        raise ValueError(f"variances must be positive, got {variances}")
    w = anchor.w * math.exp(off.tw * v_s)
    h = anchor.h * math.exp(off.th * v_s)
    if not (math.isfinite(w) and math.isfinite(h)) or w > DECODE_EXTENT_CAP or h > DECODE_EXTENT_CAP:
        raise OverflowError(
            f"decoded extent overflows (tw={off.tw}, th={off.th}, variances={variances})"
        )
    return to_corner(
        CenterBox(
            cx=off.tx * v_c * anchor.w + anchor.cx,
            cy=off.ty * v_c * anchor.h + anchor.cy,
            w=w,
            h=h,
        )
    )


def encode_array(
    gt_boxes: np.ndarray,
    anchor_boxes: np.ndarray,
    variances: tuple[float, float] = DEFAULT_VARIANCES,
) -> np.ndarray:
    """Vectorized :func:`encode` over (M, 4) center-form arrays."""
    v_c, v_s = variances
    gt = np.asarray(gt_boxes, dtype=np.float64)
    an = np.asarray(anchor_boxes, dtype=np.float64)
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - an[:, 0]) / (an[:, 2] * v_c)
    out[:, 1] = (gt[:, 1] - an[:, 1]) / (an[:, 3] * v_c)
    out[:, 2] = np.log(gt[:, 2] / an[:, 2]) / v_s
    out[:, 3] = np.log(gt[:, 3] / an[:, 3]) / v_s
    return out


def decode_array(
    offsets: np.ndarray,
    anchor_boxes: np.ndarray,
    variances: tuple[float, float] = DEFAULT_VARIANCES,
) -> np.ndarray:
    """Vectorized :func:`decode` to (N, 4) corner-form arrays.

    Unlike the scalar decode this does not raise on overflow; garbage
    rows come back non-finite and are the caller's to drop.
    """
    v_c, v_s = variances
    off = np.asarray(offsets, dtype=np.float64)
    an = np.asarray(anchor_boxes, dtype=np.float64)
    with np.errstate(over="ignore"):
        cx = off[:, 0] * v_c * an[:, 2] + an[:, 0]
        cy = off[:, 1] * v_c * an[:, 3] + an[:, 1]
        w = an[:, 2] * np.exp(off[:, 2] * v_s)
        h = an[:, 3] * np.exp(off[:, 3] * v_s)
    corners = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    corners[(w > DECODE_EXTENT_CAP) | (h > DECODE_EXTENT_CAP)] = np.nan
    return corners


def clip_to_unit(b: BoundingBox) -> BoundingBox:
    """Clamp a box to the unit square; error if nothing remains."""
    xmin = min(max(b.xmin, 0.0), 1.0)
    ymin = min(max(b.ymin, 0.0), 1.0)
    xmax = min(max(b.xmax, 0.0), 1.0)
    ymax = min(max(b.ymax, 0.0), 1.0)
    if xmin >= xmax or ymin >= ymax:
        raise ValueError(f"box {b.as_tuple()} collapses to nothing inside the unit square")
    return BoundingBox(xmin, ymin, xmax, ymax)
