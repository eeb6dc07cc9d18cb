"""Anchor matching, detection losses, and prediction decoding.

Class conventions: ground truths carry integer foreground class ids in
``0..C-1``; prediction score columns are ``C + 1`` wide with background
at column 0, so foreground class ``c`` scores live in column ``c + 1``.
Human-readable labels are attached only when decoding detections.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import (
    DEFAULT_VARIANCES,
    AnchorSet,
    BoundingBox,
    CenterBox,
    clip_to_unit,
    decode_array,
    encode_array,
    to_center,
)

BACKGROUND = -1

GroundTruth = tuple[int, BoundingBox]


@dataclass(frozen=True)
class Detection:
    """A scored, class-labeled box in normalized coordinates."""

    label: str
    score: float
    box: BoundingBox

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor assignment produced by :func:`match_anchors`.

    ``gt_index[i]`` is the matched ground-truth index or -1 for
    background; ``class_id`` and ``iou`` mirror it.
    """

    gt_index: np.ndarray  # (N,) int64
    class_id: np.ndarray  # (N,) int64, -1 for background
    iou: np.ndarray  # (N,) float64, 0 for background

    @property
    def n_matched(self) -> int:
        return int(np.count_nonzero(self.gt_index >= 0))

    @property
    def matched_mask(self) -> np.ndarray:
        return self.gt_index >= 0


@dataclass(frozen=True)
class RawPredictions:
    """Per-anchor regression offsets and class scores from a detector head."""

    offsets: np.ndarray  # (N, 4) float64
    scores: np.ndarray  # (N, C+1) float64, background at column 0

    def __post_init__(self) -> None:
        offsets = np.asarray(self.offsets, dtype=np.float64)
        scores = np.asarray(self.scores, dtype=np.float64)
        if offsets.ndim != 2 or offsets.shape[1] != 4:
            raise ValueError(f"offsets must be (N, 4), got {offsets.shape}")
        if scores.ndim != 2 or scores.shape[0] != offsets.shape[0]:
            raise ValueError(
                f"scores shape {scores.shape} inconsistent with offsets {offsets.shape}"
            )
        if scores.shape[1] < 2:
            raise ValueError("scores need background plus at least one foreground class")
        if not (np.all(np.isfinite(offsets)) and np.all(np.isfinite(scores))):
            raise ValueError("predictions must be finite")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return self.offsets.shape[0]

    @property
    def num_classes(self) -> int:
        """Foreground class count (score width minus background)."""
        return self.scores.shape[1] - 1


@dataclass(frozen=True)
class LossReport:
    """Localization and confidence losses over one set of predictions."""

    loc_loss: float
    conf_loss: float
    total: float
    n_matched: int

    def as_text(self) -> str:
        return (
            f"loc_loss={self.loc_loss:.6f} conf_loss={self.conf_loss:.6f} "
            f"total={self.total:.6f} n_matched={self.n_matched}"
        )


def _pairwise_iou(gt_corners: np.ndarray, anchor_corners: np.ndarray) -> np.ndarray:
    """IoU matrix (G, N) between corner-form box arrays."""
    ix = np.minimum(gt_corners[:, None, 2], anchor_corners[None, :, 2]) - np.maximum(
        gt_corners[:, None, 0], anchor_corners[None, :, 0]
    )
    iy = np.minimum(gt_corners[:, None, 3], anchor_corners[None, :, 3]) - np.maximum(
        gt_corners[:, None, 1], anchor_corners[None, :, 1]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_g = (gt_corners[:, 2] - gt_corners[:, 0]) * (gt_corners[:, 3] - gt_corners[:, 1])
    area_a = (anchor_corners[:, 2] - anchor_corners[:, 0]) * (
        anchor_corners[:, 3] - anchor_corners[:, 1]
    )
    union = area_g[:, None] + area_a[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def _anchor_corners(anchors: AnchorSet) -> np.ndarray:
    b = anchors.boxes
    half_w = b[:, 2] / 2.0
    half_h = b[:, 3] / 2.0
    return np.stack(
        [b[:, 0] - half_w, b[:, 1] - half_h, b[:, 0] + half_w, b[:, 1] + half_h], axis=1
    )


def match_anchors(
    anchors: AnchorSet,
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Assign anchors to ground truths in two phases.

    Phase 1 guarantees coverage: ground truths repeatedly claim the
    best remaining (gt, anchor) pair by IoU regardless of threshold,
    ties broken by lower gt index then lower anchor index. Phase 2
    assigns every unclaimed anchor whose best-gt IoU meets the
    threshold to that gt (ties by lower gt index). Each anchor ends up
    with at most one ground truth.
    """
    n = len(anchors)
    if n == 0:
        raise ValueError("cannot match against an empty anchor set")
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")

    gt_index = np.full(n, BACKGROUND, dtype=np.int64)
    class_id = np.full(n, BACKGROUND, dtype=np.int64)
    iou_out = np.zeros(n, dtype=np.float64)
    if not gts:
        return MatchResult(gt_index=gt_index, class_id=class_id, iou=iou_out)
    if len(gts) > n:
        raise ValueError(f"{len(gts)} ground truths cannot all claim one of {n} anchors")

    gt_corners = np.array([g[1].as_tuple() for g in gts], dtype=np.float64)
    matrix = _pairwise_iou(gt_corners, _anchor_corners(anchors))

    # Phase 1: bipartite coverage. np.argmax on the masked matrix picks
    # the first flat maximum, which is exactly the (lower gt, lower
    # anchor) tie rule.
    work = matrix.copy()
    for _ in range(len(gts)):
        j, i = np.unravel_index(np.argmax(work), work.shape)
        gt_index[i] = j
        iou_out[i] = matrix[j, i]
        work[j, :] = -1.0
        work[:, i] = -1.0

    # Phase 2: threshold assignment for the anchors still free.
    free = gt_index == BACKGROUND
    if np.any(free):
        best_gt = np.argmax(matrix[:, free], axis=0)
        best_iou = matrix[best_gt, np.flatnonzero(free)]
        take = best_iou >= iou_threshold
        idx = np.flatnonzero(free)[take]
        gt_index[idx] = best_gt[take]
        iou_out[idx] = best_iou[take]

    matched = gt_index >= 0
    labels = np.array([g[0] for g in gts], dtype=np.int64)
    class_id[matched] = labels[gt_index[matched]]
    return MatchResult(gt_index=gt_index, class_id=class_id, iou=iou_out)


def smooth_l1(d: np.ndarray) -> np.ndarray:
    """Elementwise smooth-L1: 0.5 d^2 inside |d| < 1, |d| - 0.5 outside."""
    ad = np.abs(d)
    return np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)


def localization_loss(
    preds: RawPredictions,
    gts: Sequence[GroundTruth],
    match: MatchResult,
    anchors: AnchorSet,
    variances: tuple[float, float] = DEFAULT_VARIANCES,
) -> float:
    """Smooth-L1 between predicted offsets and encoded targets, averaged
    over matched anchors; 0 when nothing matched."""
    if len(preds) != len(anchors):
        raise ValueError(f"{len(preds)} predictions for {len(anchors)} anchors")
    matched = match.matched_mask
    n_matched = int(np.count_nonzero(matched))
    if n_matched == 0:
        return 0.0
    gt_centers = np.array(
        [to_center(gts[j][1]).as_tuple() for j in match.gt_index[matched]], dtype=np.float64
    )
    targets = encode_array(gt_centers, anchors.boxes[matched], variances)
    diffs = preds.offsets[matched] - targets
    return float(np.sum(smooth_l1(diffs)) / n_matched)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def confidence_loss(
    preds: RawPredictions,
    match: MatchResult,
    neg_pos_ratio: float = 3.0,
) -> float:
    """Softmax cross-entropy with hard-negative mining.

    Matched anchors contribute cross-entropy against their class; the
    unmatched anchors with the highest background cross-entropy (the
    most confidently wrong ones) contribute against background, capped
    at ``neg_pos_ratio`` negatives per positive. Averaged over matched
    anchors; 0 when nothing matched.
    """
    if neg_pos_ratio < 0:
        raise ValueError(f"neg_pos_ratio must be >= 0, got {neg_pos_ratio}")
    if len(preds) != len(match.gt_index):
        raise ValueError(f"{len(preds)} predictions for {len(match.gt_index)} match entries")
    matched = match.matched_mask
    n_matched = int(np.count_nonzero(matched))
    if n_matched == 0:
        return 0.0

    log_probs = _log_softmax(preds.scores)
    pos_targets = match.class_id[matched] + 1  # foreground c -> column c+1
    loss = -float(np.sum(log_probs[matched, pos_targets]))

    n_neg = min(int(neg_pos_ratio * n_matched), int(np.count_nonzero(~matched)))
    if n_neg > 0:
        bg_ce = -log_probs[~matched, 0]
        # Stable sort keeps the lower-index anchor first among equals.
        order = np.argsort(-bg_ce, kind="stable")
        loss += float(np.sum(bg_ce[order[:n_neg]]))
    return loss / n_matched


def total_loss(
    preds: RawPredictions,
    gts: Sequence[GroundTruth],
    anchors: AnchorSet,
    variances: tuple[float, float] = DEFAULT_VARIANCES,
    neg_pos_ratio: float = 3.0,
    iou_threshold: float = 0.5,
) -> LossReport:
    """Match, then combine localization and confidence losses."""
    match = match_anchors(anchors, gts, iou_threshold=iou_threshold)
    loc = localization_loss(preds, gts, match, anchors, variances)
    conf = confidence_loss(preds, match, neg_pos_ratio)
    return LossReport(
        loc_loss=loc, conf_loss=conf, total=loc + conf, n_matched=match.n_matched
    )


def decode_detections(
    raw: RawPredictions,
    anchors: AnchorSet,
    class_names: Sequence[str],
    variances: tuple[float, float] = DEFAULT_VARIANCES,
    score_threshold: float = 0.5,
) -> list[Detection]:
    """Turn raw predictions into Detections.

    Scores are softmaxed per anchor; every (anchor, foreground class)
    pair whose probability meets the threshold emits a Detection with
    the decoded, unit-clipped box. Anchors whose decoded box is
    non-finite or collapses under clipping are dropped. Output order is
    anchor-major, class-minor.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError(f"score_threshold must be in [0, 1], got {score_threshold}")
    if len(raw) != len(anchors):
        raise ValueError(f"{len(raw)} predictions for {len(anchors)} anchors")
    if len(class_names) != raw.num_classes:
        raise ValueError(
            f"{len(class_names)} class names for {raw.num_classes} foreground classes"
        )

    probs = np.exp(_log_softmax(raw.scores))
    corners = decode_array(raw.offsets, anchors.boxes, variances)
    clipped = np.clip(corners, 0.0, 1.0)
    with np.errstate(invalid="ignore"):
        alive = np.all(np.isfinite(corners), axis=1)
        alive &= (clipped[:, 2] > clipped[:, 0]) & (clipped[:, 3] > clipped[:, 1])

    detections: list[Detection] = []
    hits = probs[:, 1:] >= score_threshold
    for i in np.flatnonzero(alive & hits.any(axis=1)):
        box = BoundingBox(*clipped[i])
        for c in np.flatnonzero(hits[i]):
            detections.append(
                Detection(label=class_names[c], score=float(probs[i, c + 1]), box=box)
            )
    return detections


def nms(
    dets: Sequence[Detection],
    iou_threshold: float = 0.45,
    top_k: int = 100,
) -> list[Detection]:
    """Per-class greedy non-maximum suppression.

    Within each class, repeatedly keep the highest-score remaining
    detection (earlier input index wins ties) and discard same-class
    detections overlapping it with IoU >= threshold. Survivors are
    returned sorted by descending score (ties by input order), truncated
    to ``top_k``.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if not dets:
        return []

    by_label: dict[str, list[int]] = {}
    for idx, d in enumerate(dets):
        by_label.setdefault(d.label, []).append(idx)

    kept: list[int] = []
    for indices in by_label.values():
        corners = np.array([dets[i].box.as_tuple() for i in indices], dtype=np.float64)
        scores = np.array([dets[i].score for i in indices], dtype=np.float64)
        order = sorted(range(len(indices)), key=lambda r: (-scores[r], indices[r]))
        alive = np.ones(len(indices), dtype=bool)
        for r in order:
            if not alive[r]:
                continue
            kept.append(indices[r])
            alive[r] = False
            others = np.flatnonzero(alive)
            if others.size:
                ious = _pairwise_iou(corners[r : r + 1], corners[others])[0]
                alive[others[ious >= iou_threshold]] = False

    kept.sort(key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in kept[:top_k]]
