"""Independent reference implementations used to check the library.

Everything here is deliberately written from the operation definitions,
not from the library code paths it validates: rasterized IoU, loop-based
convolutions, quadratic NMS, and the two-phase matcher.
"""

from __future__ import annotations

import math

import numpy as np

from scarecrow.geometry import BoundingBox
from scarecrow.multibox import Detection


def raster_iou(a: BoundingBox, b: BoundingBox, cells: int = 1000) -> float:
    """IoU by counting covered cells of a cells x cells grid.

    A cell counts as covered when its center lies inside the box. The
    2-D count factorizes into per-axis 1-D counts because the boxes are
    axis-aligned; ``raster_iou_dense`` below does the literal 2-D count
    and is used to validate this factorization.
    """
    centers = (np.arange(cells) + 0.5) / cells

    def covered(lo: float, hi: float) -> np.ndarray:
        return (centers >= lo) & (centers < hi)

    ax, ay = covered(a.xmin, a.xmax), covered(a.ymin, a.ymax)
    bx, by = covered(b.xmin, b.xmax), covered(b.ymin, b.ymax)
    inter = int(np.count_nonzero(ax & bx)) * int(np.count_nonzero(ay & by))
    area_a = int(np.count_nonzero(ax)) * int(np.count_nonzero(ay))
    area_b = int(np.count_nonzero(bx)) * int(np.count_nonzero(by))
    union = area_a + area_b - inter
    return inter / union if union else 0.0


def raster_iou_dense(a: BoundingBox, b: BoundingBox, cells: int = 200) -> float:
    """Literal 2-D mask rasterization (slow; validates raster_iou)."""
    centers = (np.arange(cells) + 0.5) / cells
    xs, ys = np.meshgrid(centers, centers)

    def mask(box: BoundingBox) -> np.ndarray:
        return (xs >= box.xmin) & (xs < box.xmax) & (ys >= box.ymin) & (ys < box.ymax)

    ma, mb = mask(a), mask(b)
    inter = int(np.count_nonzero(ma & mb))
    union = int(np.count_nonzero(ma | mb))
    return inter / union if union else 0.0


def corner_iou(b1: tuple, b2: tuple) -> float:
    """Scalar IoU on corner tuples, written out longhand."""
    ix = min(b1[2], b2[2]) - max(b1[0], b2[0])
    iy = min(b1[3], b2[3]) - max(b1[1], b2[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area1 = (b1[2] - b1[0]) * (b1[3] - b1[1])
    area2 = (b2[2] - b2[0]) * (b2[3] - b2[1])
    return inter / (area1 + area2 - inter)


def nms_oracle(
    dets: list[Detection], iou_threshold: float, top_k: int
) -> list[Detection]:
    """Quadratic per-class greedy suppression, straight from the rule."""
    keep: list[int] = []
    for label in {d.label for d in dets}:
        remaining = {i for i, d in enumerate(dets) if d.label == label}
        while remaining:
            best = min(remaining, key=lambda i: (-dets[i].score, i))
            keep.append(best)
            remaining.discard(best)
            for j in sorted(remaining):
                if corner_iou(dets[best].box.as_tuple(), dets[j].box.as_tuple()) >= iou_threshold:
                    remaining.discard(j)
    keep.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in keep[:top_k]]


def match_oracle(
    anchor_boxes: np.ndarray,
    gts: list,
    iou_threshold: float,
) -> list[tuple[int, float]]:
    """Two-phase matcher; returns per-anchor (gt index or -1, iou).

    Phase 1: repeatedly assign the best remaining (gt, anchor) pair by
    IoU (ties -> lower gt index, then lower anchor index) until every gt
    owns an anchor. Phase 2: each unclaimed anchor joins its best gt
    (ties -> lower gt index) when the IoU meets the threshold.
    """
    n = anchor_boxes.shape[0]
    g = len(gts)
    corners = []
    for cx, cy, w, h in anchor_boxes:
        corners.append((cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
    matrix = [
        [corner_iou(gts[j][1].as_tuple(), corners[i]) for i in range(n)] for j in range(g)
    ]

    result: list[tuple[int, float]] = [(-1, 0.0)] * n
    free_gts = set(range(g))
    free_anchors = set(range(n))
    while free_gts:
        best = None  # (iou, j, i)
        for j in sorted(free_gts):
            for i in sorted(free_anchors):
                v = matrix[j][i]
                if best is None or v > best[0]:
                    best = (v, j, i)
        _, j, i = best
        result[i] = (j, matrix[j][i])
        free_gts.discard(j)
        free_anchors.discard(i)

    for i in sorted(free_anchors):
        best_j = -1
        best_v = -1.0
        for j in range(g):
            if matrix[j][i] > best_v:
                best_v = matrix[j][i]
                best_j = j
        if best_v >= iou_threshold:
            result[i] = (best_j, best_v)
    return result


def conv2d_oracle(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Direct-summation standard convolution with SAME zero padding."""
    k = kernel.shape[0]
    h, w, _ = x.shape
    out_h = math.ceil(h / stride)
    out_w = math.ceil(w / stride)
    pad_h = max((out_h - 1) * stride + k - h, 0)
    pad_w = max((out_w - 1) * stride + k - w, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((out_h, out_w, kernel.shape[3]))
    for oy in range(out_h):
        for ox in range(out_w):
            for ky in range(k):
                for kx in range(k):
                    iy = oy * stride + ky - top
                    ix = ox * stride + kx - left
                    if 0 <= iy < h and 0 <= ix < w:
                        out[oy, ox, :] += x[iy, ix, :] @ kernel[ky, kx, :, :]
    return out


def depthwise_oracle(x: np.ndarray, kernel: np.ndarray, stride: int) -> np.ndarray:
    """Direct-summation per-channel convolution with SAME zero padding."""
    k = kernel.shape[0]
    h, w, ch = x.shape
    out_h = math.ceil(h / stride)
    out_w = math.ceil(w / stride)
    pad_h = max((out_h - 1) * stride + k - h, 0)
    pad_w = max((out_w - 1) * stride + k - w, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((out_h, out_w, ch))
    for oy in range(out_h):
        for ox in range(out_w):
            for ky in range(k):
                for kx in range(k):
                    iy = oy * stride + ky - top
                    ix = ox * stride + kx - left
                    if 0 <= iy < h and 0 <= ix < w:
                        out[oy, ox, :] += x[iy, ix, :] * kernel[ky, kx, :]
    return out


def pointwise_oracle(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-pixel matrix multiply, one pixel at a time."""
    h, w, _ = x.shape
    out = np.zeros((h, w, weights.shape[1]))
    for y in range(h):
        for xx in range(w):
            out[y, xx, :] = x[y, xx, :] @ weights + bias
    return out
