"""Animal-detection monitoring pipeline.

Box geometry and anchors, multibox matching and losses, a small
depthwise-separable inference engine, Pascal-VOC dataset tooling, an
evaluation harness, and the monitoring daemon that turns detections
into threat events, deterrence commands, and alerts.
"""

__version__ = "0.1.0"

from .geometry import (
    AnchorConfig,
    AnchorSet,
    BoundingBox,
    BoxOffsets,
    CenterBox,
    clip_to_unit,
    decode,
    encode,
    generate_anchors,
    iou,
    to_center,
    to_corner,
)
from .multibox import (
    Detection,
    LossReport,
    MatchResult,
    RawPredictions,
    decode_detections,
    match_anchors,
    nms,
    total_loss,
)

__all__ = [
    "AnchorConfig",
    "AnchorSet",
    "BoundingBox",
    "BoxOffsets",
    "CenterBox",
    "Detection",
    "LossReport",
    "MatchResult",
    "RawPredictions",
    "clip_to_unit",
    "decode",
    "decode_detections",
    "encode",
    "generate_anchors",
    "iou",
    "match_anchors",
    "nms",
    "to_center",
    "to_corner",
    "total_loss",
    "__version__",
]
