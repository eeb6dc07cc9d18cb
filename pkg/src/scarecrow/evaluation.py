"""Detection-quality metrics and the stepped evaluation harness.

The headline "accuracy" of a detector is ambiguous, so three readings
are computed side by side: detection accuracy TP/(TP+FP+FN) at IoU 0.5,
classification accuracy off the confusion matrix diagonal, and the
per-frame hit rate (frames with no mistakes at all). Precision, recall,
per-class AP and mAP round out the report.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

from .backbone import Detector, DetectorScript, Image, StubDetector
from .dataset import AnnotatedImage, Dataset
from .geometry import BoundingBox, iou
from .multibox import Detection

BACKGROUND_LABEL = "__background__"

GroundTruth = tuple[str, BoundingBox]


@dataclass(frozen=True)
class MatchedOutcome:
    """One image's detections partitioned into TP / FP / FN."""

    tp: tuple[tuple[Detection, GroundTruth], ...]
    fp: tuple[Detection, ...]
    fn: tuple[GroundTruth, ...]

    @property
    def detections(self) -> list[Detection]:
        return [d for d, _ in self.tp] + list(self.fp)

    @property
    def ground_truths(self) -> list[GroundTruth]:
        return [g for _, g in self.tp] + list(self.fn)


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> MatchedOutcome:
    """Greedy score-ordered matching of detections to ground truth.

    Detections are visited by descending score (input order breaks
    ties); each claims the unmatched same-class ground truth of highest
    IoU at or above the threshold. Leftover detections are false
    positives, leftover ground truths false negatives.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    tp = []
    fp = []
    for i in order:
        det = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, (label, box) in enumerate(gts):
            if taken[j] or label != det.label:
                continue
            overlap = iou(det.box, box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou = overlap
                best_j = j
        if best_j >= 0:
            taken[best_j] = True
            tp.append((det, gts[best_j]))
        else:
            fp.append(det)
    fn = tuple(gts[j] for j in range(len(gts)) if not taken[j])
    return MatchedOutcome(tp=tuple(tp), fp=tuple(fp), fn=fn)


@dataclass(frozen=True)
class Metrics:
    """Aggregate detection metrics over a set of matched outcomes."""

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    accuracy: float
    per_class_ap: Mapping[str, float]
    mean_ap: float
    confusion: np.ndarray  # (C+1, C+1); background last row/column
    class_names: tuple[str, ...]
    classification_accuracy: float
    frame_hit_rate: float

    def as_text(self) -> str:
        lines = [
            f"tp={self.tp} fp={self.fp} fn={self.fn}",
            f"precision={self.precision:.6f}",
            f"recall={self.recall:.6f}",
            f"accuracy={self.accuracy:.6f}",
            f"classification_accuracy={self.classification_accuracy:.6f}",
            f"frame_hit_rate={self.frame_hit_rate:.6f}",
            f"map={self.mean_ap:.6f}",
        ]
        for name in self.class_names:
            lines.append(f"ap[{name}]={self.per_class_ap.get(name, 0.0):.6f}")
        return "\n".join(lines)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 1.0


def _average_precision(scored: list[tuple[float, bool]], n_gt: int) -> float:
    """All-point interpolated AP from (score, is_tp) pairs."""
    if n_gt == 0:
        return 0.0
    if not scored:
        return 0.0
    scored = sorted(scored, key=lambda p: -p[0])
    flags = np.array([hit for _, hit in scored], dtype=np.float64)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(1.0 - flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)

    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def confusion(
    outcomes: Sequence[MatchedOutcome],
    class_names: Sequence[str],
    iou_threshold: float = 0.5,
) -> np.ndarray:
    """(C+1)x(C+1) matrix from a class-agnostic second matching pass.

    Cell (i, j) counts ground truths of class i matched (by IoU alone)
    to detections of class j; misses land in the background column,
    spurious detections in the background row.
    """
    index = {name: i for i, name in enumerate(class_names)}
    bg = len(class_names)
    matrix = np.zeros((bg + 1, bg + 1), dtype=np.int64)
    for outcome in outcomes:
        dets = outcome.detections
        gts = outcome.ground_truths
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        taken = [False] * len(gts)
        for i in order:
            det = dets[i]
            best_j = -1
            best_iou = 0.0
            for j, (_, box) in enumerate(gts):
                if taken[j]:
                    continue
                overlap = iou(det.box, box)
                if overlap >= iou_threshold and overlap > best_iou:
                    best_iou = overlap
                    best_j = j
            if best_j >= 0:
                taken[best_j] = True
                matrix[index[gts[best_j][0]], index[det.label]] += 1
            else:
                matrix[bg, index[det.label]] += 1
        for j, (label, _) in enumerate(gts):
            if not taken[j]:
                matrix[index[label], bg] += 1
    return matrix


def compute_metrics(
    outcomes: Sequence[MatchedOutcome],
    class_names: Sequence[str] | None = None,
    iou_threshold: float = 0.5,
) -> Metrics:
    """Aggregate counts, rates, per-class AP, mAP, and the confusion matrix.

    ``class_names`` fixes the confusion-matrix ordering; labels observed
    in the outcomes but missing from it are appended (sorted) so a
    detector emitting unexpected classes still gets counted.
    """
    observed = set()
    for o in outcomes:
        observed.update(d.label for d in o.detections)
        observed.update(label for label, _ in o.ground_truths)
    if class_names is None:
        class_names = tuple(sorted(observed))
    else:
        extra = observed - set(class_names)
        class_names = tuple(class_names) + tuple(sorted(extra))

    tp = sum(len(o.tp) for o in outcomes)
    fp = sum(len(o.fp) for o in outcomes)
    fn = sum(len(o.fn) for o in outcomes)

    scored: dict[str, list[tuple[float, bool]]] = {name: [] for name in class_names}
    n_gt: dict[str, int] = {name: 0 for name in class_names}
    for o in outcomes:
        for det, _ in o.tp:
            scored[det.label].append((det.score, True))
        for det in o.fp:
            scored[det.label].append((det.score, False))
        for label, _ in o.ground_truths:
            n_gt[label] += 1

    per_class_ap = {
        name: _average_precision(scored[name], n_gt[name])
        for name in class_names
        if n_gt[name] > 0
    }
    if per_class_ap:
        mean_ap = float(np.mean(list(per_class_ap.values())))
    else:
        # No class has ground truth: vacuously perfect only if nothing
        # was predicted either.
        mean_ap = 1.0 if tp + fp == 0 else 0.0

    matrix = confusion(outcomes, class_names, iou_threshold)
    total_gts = tp + fn
    diag = int(np.trace(matrix[: len(class_names), : len(class_names)]))
    hits = sum(1 for o in outcomes if not o.fp and not o.fn)

    return Metrics(
        tp=tp,
        fp=fp,
        fn=fn,
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        accuracy=_ratio(tp, tp + fp + fn),
        per_class_ap=per_class_ap,
        mean_ap=mean_ap,
        confusion=matrix,
        class_names=class_names,
        classification_accuracy=_ratio(diag, total_gts),
        frame_hit_rate=_ratio(hits, len(outcomes)),
    )


def pr_curve_rows(
    outcomes: Sequence[MatchedOutcome],
    class_names: Sequence[str] | None = None,
) -> list[tuple[str, float, float, float]]:
    """(class, threshold, precision, recall) rows sweeping detection scores."""
    metrics_names = (
        tuple(class_names)
        if class_names is not None
        else tuple(sorted({d.label for o in outcomes for d in o.detections}
                          | {g[0] for o in outcomes for g in o.ground_truths}))
    )
    rows = []
    for name in metrics_names:
        scored = []
        n_gt = 0
        for o in outcomes:
            for det, _ in o.tp:
                if det.label == name:
                    scored.append((det.score, True))
            for det in o.fp:
                if det.label == name:
                    scored.append((det.score, False))
            n_gt += sum(1 for label, _ in o.ground_truths if label == name)
        scored.sort(key=lambda p: -p[0])
        tp_cum = 0
        fp_cum = 0
        for score, hit in scored:
            tp_cum += int(hit)
            fp_cum += int(not hit)
            rows.append(
                (
                    name,
                    score,
                    _ratio(tp_cum, tp_cum + fp_cum),
                    _ratio(tp_cum, n_gt),
                )
            )
    return rows


@dataclass(frozen=True)
class HarnessConfig:
    """Stepped-evaluation parameters; paths are resolved by the caller/CLI."""

    steps: int
    iou_threshold: float = 0.5
    score_threshold: float = 0.5
    dataset_path: str | None = None
    stub_script_path: str | None = None
    weights_path: str | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must be in (0, 1), got {self.iou_threshold}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must be in [0, 1], got {self.score_threshold}")


def normalized_ground_truths(img: AnnotatedImage) -> list[GroundTruth]:
    """Pixel-space annotation boxes as normalized (label, box) pairs."""
    return [
        (
            obj.label,
            BoundingBox(
                obj.box.xmin / img.width,
                obj.box.ymin / img.height,
                obj.box.xmax / img.width,
                obj.box.ymax / img.height,
            ),
        )
        for obj in img.objects
    ]


def run_harness(
    cfg: HarnessConfig,
    dataset: Dataset | None = None,
    detector: Detector | None = None,
    image_loader: Callable[[AnnotatedImage], Image | None] | None = None,
    log: TextIO | None = None,
    outcomes_out: list[MatchedOutcome] | None = None,
) -> Metrics:
    """Iterate evaluation steps, cycling the dataset, and aggregate metrics.

    Step ``s`` evaluates image ``s mod len(dataset)``; the detector is
    keyed by the step index so a scripted stub can vary across cycles.
    Deterministic for stub detectors. ``outcomes_out``, when given, is
    filled with the per-step matched outcomes (for PR-curve export).
    """
    if dataset is None:
        if cfg.dataset_path is None:
            raise ValueError("no dataset given and no dataset_path configured")
        dataset = Dataset.load(cfg.dataset_path)
    if detector is None:
        if cfg.stub_script_path is None:
            raise ValueError("no detector given and no stub_script_path configured")
        detector = StubDetector(DetectorScript.from_json(Path(cfg.stub_script_path).read_text()))
    if not dataset.images:
        raise ValueError("cannot evaluate an empty dataset")

    outcomes = []
    for step in range(cfg.steps):
        img_ann = dataset.images[step % len(dataset.images)]
        image = image_loader(img_ann) if image_loader is not None else None
        dets = [
            d
            for d in detector.detect(image, step)
            if d.score >= cfg.score_threshold
        ]
        outcome = match_detections(
            dets, normalized_ground_truths(img_ann), cfg.iou_threshold
        )
        outcomes.append(outcome)
        if outcomes_out is not None:
            outcomes_out.append(outcome)
        if log is not None:
            log.write(
                f"step={step} image={img_ann.filename} "
                f"tp={len(outcome.tp)} fp={len(outcome.fp)} fn={len(outcome.fn)}\n"
            )
    return compute_metrics(
        outcomes, class_names=dataset.class_names, iou_threshold=cfg.iou_threshold
    )
