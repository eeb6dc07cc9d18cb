"""Forward-only inference engine and pluggable detector backends.

The convolution stack follows the MobileNet pattern: a standard entry
convolution, then depthwise + pointwise pairs, with 1x1 prediction heads
tapped off intermediate feature maps. All convolutions use zero "SAME"
padding (output side = ceil(input / stride), extra padding on the
bottom/right when uneven) and cross-correlation (no kernel flip).

Weights load from the SCRW1 binary format; see the README for the byte
layout. There is no training here: weights are synthesized or loaded.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import AnchorConfig, AnchorSet, BoundingBox, generate_anchors
from .multibox import Detection, RawPredictions, decode_detections, nms

WEIGHTS_MAGIC = b"SCRW"
WEIGHTS_VERSION = 1

KIND_CONV = 1
KIND_DEPTHWISE = 2
KIND_POINTWISE = 3
KIND_RELU = 4
KIND_HEAD = 5


class WeightsError(ValueError):
    """Raised for malformed or inconsistent SCRW1 weight files."""


@dataclass(frozen=True)
class Image:
    """RGB image with intensities in [0, 1], stored (height, width, 3)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image must be at least 1x1, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("image intensities must be finite and in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def resize_image(img: Image, size: int) -> Image:
    """Nearest-neighbor resize to a square of the given side."""
    ys = np.minimum((np.arange(size) + 0.5) * img.height / size, img.height - 1).astype(int)
    xs = np.minimum((np.arange(size) + 0.5) * img.width / size, img.width - 1).astype(int)
    return Image(pixels=img.pixels[np.ix_(ys, xs)])


# A Tensor3 is a dense (height, width, channels) float array; ops below
# validate shapes and leave dtype float64.
Tensor3 = np.ndarray


def _same_pad(x: Tensor3, k: int, stride: int) -> Tensor3:
    h, w = x.shape[:2]
    out_h = -(-h // stride)
    out_w = -(-w // stride)
    pad_h = max((out_h - 1) * stride + k - h, 0)
    pad_w = max((out_w - 1) * stride + k - w, 0)
    top, left = pad_h // 2, pad_w // 2
    return np.pad(x, ((top, pad_h - top), (left, pad_w - left), (0, 0)))


def conv2d(x: Tensor3, kernel: np.ndarray, stride: int = 1) -> Tensor3:
    """Standard convolution with SAME zero padding.

    ``kernel`` is (k, k, in_ch, out_ch); output is (ceil(H/stride),
    ceil(W/stride), out_ch).
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be (k, k, in, out), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if kernel.shape[2] != x.shape[2]:
        raise ValueError(f"kernel expects {kernel.shape[2]} channels, input has {x.shape[2]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    padded = _same_pad(x, k, stride)
    # windows: (H', W', C, k, k); contract (k, k, C) against the kernel.
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    return np.tensordot(windows, kernel, axes=((3, 4, 2), (0, 1, 2)))


def depthwise_conv2d(x: Tensor3, kernel: np.ndarray, stride: int = 1) -> Tensor3:
    """Per-channel convolution; ``kernel`` is (k, k, ch), no channel mixing."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C), got {x.shape}")
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be (k, k, ch), got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if kernel.shape[2] != x.shape[2]:
        raise ValueError(f"kernel expects {kernel.shape[2]} channels, input has {x.shape[2]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    padded = _same_pad(x, k, stride)
    windows = sliding_window_view(padded, (k, k), axis=(0, 1))[::stride, ::stride]
    return np.einsum("xycij,ijc->xyc", windows, kernel)


def pointwise_conv(x: Tensor3, weights: np.ndarray, bias: np.ndarray | None = None) -> Tensor3:
    """Per-pixel linear map across channels; ``weights`` is (in_ch, out_ch)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"input must be (H, W, C), got {x.shape}")
    if weights.ndim != 2 or weights.shape[0] != x.shape[2]:
        raise ValueError(f"weights {weights.shape} do not match {x.shape[2]} input channels")
    out = x @ weights
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (weights.shape[1],):
            raise ValueError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
        out = out + bias
    return out


def relu(x: Tensor3) -> Tensor3:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


@dataclass(frozen=True, eq=False)
class ConvLayer:
    k: int
    stride: int
    in_ch: int
    out_ch: int
    weights: np.ndarray  # (k, k, in_ch, out_ch)
    bias: np.ndarray  # (out_ch,)


@dataclass(frozen=True, eq=False)
class DepthwiseLayer:
    k: int
    stride: int
    ch: int
    weights: np.ndarray  # (k, k, ch); depthwise layers carry no bias


@dataclass(frozen=True, eq=False)
class PointwiseLayer:
    in_ch: int
    out_ch: int
    weights: np.ndarray  # (in_ch, out_ch)
    bias: np.ndarray  # (out_ch,)


@dataclass(frozen=True, eq=False)
class ReluLayer:
    ch: int


@dataclass(frozen=True, eq=False)
class HeadLayer:
    """1x1 prediction head tapped off the running feature map.

    A head consumes the current tensor and stores its own output; the
    main chain continues with the pre-head tensor unchanged.
    """

    in_ch: int
    out_ch: int
    weights: np.ndarray  # (in_ch, out_ch)
    bias: np.ndarray  # (out_ch,)


Layer = Union[ConvLayer, DepthwiseLayer, PointwiseLayer, ReluLayer, HeadLayer]


def _layer_io(layer: Layer) -> tuple[int, int]:
    """(expected input channels, output channels of the running chain)."""
    if isinstance(layer, ConvLayer):
        return layer.in_ch, layer.out_ch
    if isinstance(layer, DepthwiseLayer):
        return layer.ch, layer.ch
    if isinstance(layer, PointwiseLayer):
        return layer.in_ch, layer.out_ch
    if isinstance(layer, ReluLayer):
        return layer.ch, layer.ch
    if isinstance(layer, HeadLayer):
        return layer.in_ch, layer.in_ch  # tap: chain channels unchanged
    raise TypeError(f"unknown layer {layer!r}")


@dataclass(frozen=True)
class Network:
    """An ordered layer chain with weights, validated for consistency."""

    layers: tuple[Layer, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise WeightsError("empty network: no layers declared")
        cur: int | None = None
        for idx, layer in enumerate(self.layers):
            expected, out = _layer_io(layer)
            if cur is not None and expected != cur:
                raise WeightsError(
                    f"inconsistent channel chain at layer {idx}: "
                    f"expects {expected} channels, previous layer emits {cur}"
                )
            cur = out

    @property
    def input_channels(self) -> int:
        return _layer_io(self.layers[0])[0]

    @property
    def heads(self) -> tuple[HeadLayer, ...]:
        return tuple(l for l in self.layers if isinstance(l, HeadLayer))

    def head_grid_sizes(self, input_size: int) -> tuple[int, ...]:
        """Spatial side of the feature map under each head for a square input."""
        side = input_size
        grids = []
        for layer in self.layers:
            if isinstance(layer, (ConvLayer, DepthwiseLayer)):
                side = -(-side // layer.stride)
            elif isinstance(layer, HeadLayer):
                grids.append(side)
        return tuple(grids)


def forward(net: Network, img: Image, num_classes: int) -> RawPredictions:
    """Run the layer chain and flatten head outputs into RawPredictions.

    Each head location holds ``b`` anchor slots of ``4 + num_classes + 1``
    channels: four box offsets then class scores with background first.
    Slots flatten in anchor order (row-major cells, slot-minor), heads in
    chain order, matching :func:`scarecrow.geometry.generate_anchors`.
    """
    if img.pixels.shape[2] != net.input_channels:
        raise ValueError(
            f"network expects {net.input_channels} input channels, image has {img.pixels.shape[2]}"
        )
    per_slot = 4 + num_classes + 1
    x = img.pixels
    head_outputs: list[np.ndarray] = []
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            x = conv2d(x, layer.weights, layer.stride) + layer.bias
        elif isinstance(layer, DepthwiseLayer):
            x = depthwise_conv2d(x, layer.weights, layer.stride)
        elif isinstance(layer, PointwiseLayer):
            x = pointwise_conv(x, layer.weights, layer.bias)
        elif isinstance(layer, ReluLayer):
            x = relu(x)
        else:
            head_outputs.append(pointwise_conv(x, layer.weights, layer.bias))
    if not head_outputs:
        raise ValueError("network has no prediction heads")

    offsets = []
    scores = []
    for out in head_outputs:
        h, w, ch = out.shape
        if ch % per_slot != 0:
            raise ValueError(
                f"head emits {ch} channels, not a multiple of {per_slot} per anchor slot"
            )
        slots = out.reshape(h * w * (ch // per_slot), per_slot)
        offsets.append(slots[:, :4])
        scores.append(slots[:, 4:])
    return RawPredictions(
        offsets=np.concatenate(offsets, axis=0), scores=np.concatenate(scores, axis=0)
    )


def _read_exact(data: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    if offset + count > len(data):
        raise WeightsError(f"truncated file: {what} needs {count} bytes past offset {offset}")
    return data[offset : offset + count], offset + count


def load_weights(path: str | Path) -> Network:
    """Parse an SCRW1 weights file into a validated :class:`Network`."""
    data = Path(path).read_bytes()
    blob, pos = _read_exact(data, 0, 12, "header")
    if blob[:4] != WEIGHTS_MAGIC:
        raise WeightsError(f"bad magic {blob[:4]!r}, expected {WEIGHTS_MAGIC!r}")
    version, layer_count = struct.unpack("<II", blob[4:12])
    if version != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported version {version}, expected {WEIGHTS_VERSION}")
    if layer_count == 0:
        raise WeightsError("empty network: file declares zero layers")

    layers: list[Layer] = []
    for idx in range(layer_count):
        blob, pos = _read_exact(data, pos, 9, f"layer {idx} descriptor")
        kind, k, stride, in_ch, out_ch = struct.unpack("<BHHHH", blob)

        def floats(count: int, what: str) -> np.ndarray:
            nonlocal pos
            raw, pos = _read_exact(data, pos, 4 * count, f"layer {idx} {what}")
            return np.frombuffer(raw, dtype="<f4").astype(np.float64)

        if kind == KIND_CONV:
            w = floats(k * k * in_ch * out_ch, "conv weights").reshape(k, k, in_ch, out_ch)
            b = floats(out_ch, "conv bias")
            layers.append(ConvLayer(k=k, stride=stride, in_ch=in_ch, out_ch=out_ch, weights=w, bias=b))
        elif kind == KIND_DEPTHWISE:
            if out_ch != in_ch:
                raise WeightsError(
                    f"layer {idx}: depthwise out_ch {out_ch} must equal in_ch {in_ch}"
                )
            w = floats(k * k * in_ch, "depthwise weights").reshape(k, k, in_ch)
            layers.append(DepthwiseLayer(k=k, stride=stride, ch=in_ch, weights=w))
        elif kind == KIND_POINTWISE:
            if k != 1:
                raise WeightsError(f"layer {idx}: pointwise kernel size must be 1, got {k}")
            w = floats(in_ch * out_ch, "pointwise weights").reshape(in_ch, out_ch)
            b = floats(out_ch, "pointwise bias")
            layers.append(PointwiseLayer(in_ch=in_ch, out_ch=out_ch, weights=w, bias=b))
        elif kind == KIND_RELU:
            if in_ch != out_ch:
                raise WeightsError(f"layer {idx}: relu in_ch {in_ch} must equal out_ch {out_ch}")
            layers.append(ReluLayer(ch=in_ch))
        elif kind == KIND_HEAD:
            if k != 1:
                raise WeightsError(f"layer {idx}: head kernel size must be 1, got {k}")
            w = floats(in_ch * out_ch, "head weights").reshape(in_ch, out_ch)
            b = floats(out_ch, "head bias")
            layers.append(HeadLayer(in_ch=in_ch, out_ch=out_ch, weights=w, bias=b))
        else:
            raise WeightsError(f"layer {idx}: unknown layer kind {kind}")
    if pos != len(data):
        raise WeightsError(f"{len(data) - pos} trailing bytes after layer {layer_count - 1}")
    return Network(layers=tuple(layers))


def save_weights(net: Network, path: str | Path) -> None:
    """Write a :class:`Network` in the SCRW1 binary format."""
    parts = [WEIGHTS_MAGIC, struct.pack("<II", WEIGHTS_VERSION, len(net.layers))]
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            parts.append(struct.pack("<BHHHH", KIND_CONV, layer.k, layer.stride, layer.in_ch, layer.out_ch))
            parts.append(layer.weights.astype("<f4").tobytes())
            parts.append(layer.bias.astype("<f4").tobytes())
        elif isinstance(layer, DepthwiseLayer):
            parts.append(struct.pack("<BHHHH", KIND_DEPTHWISE, layer.k, layer.stride, layer.ch, layer.ch))
            parts.append(layer.weights.astype("<f4").tobytes())
        elif isinstance(layer, PointwiseLayer):
            parts.append(struct.pack("<BHHHH", KIND_POINTWISE, 1, 1, layer.in_ch, layer.out_ch))
            parts.append(layer.weights.astype("<f4").tobytes())
            parts.append(layer.bias.astype("<f4").tobytes())
        elif isinstance(layer, ReluLayer):
            parts.append(struct.pack("<BHHHH", KIND_RELU, 0, 0, layer.ch, layer.ch))
        elif isinstance(layer, HeadLayer):
            parts.append(struct.pack("<BHHHH", KIND_HEAD, 1, 1, layer.in_ch, layer.out_ch))
            parts.append(layer.weights.astype("<f4").tobytes())
            parts.append(layer.bias.astype("<f4").tobytes())
        else:
            raise TypeError(f"unknown layer {layer!r}")
    Path(path).write_bytes(b"".join(parts))


# Default toy net: 160x160x3 in, entry conv to 16ch, four separable
# blocks (strides 2,1,2,2) to a 10x10x64 map under head 1, one more
# stride-2 block to 5x5x64 under head 2. Matches anchor grids (10, 5).
DEFAULT_INPUT_SIZE = 160
_DEFAULT_BLOCKS = ((2, 16, 32), (1, 32, 32), (2, 32, 64), (2, 64, 64))


def synthesize_network(
    num_classes: int = 3,
    boxes_per_cell: int = 4,
    seed: int | None = 42,
) -> Network:
    """Build the default toy architecture with seeded random weights.

    ``seed=None`` yields all-zero weights (useful as a null detector).
    """
    rng = np.random.default_rng(seed) if seed is not None else None

    def tensor(*shape: int) -> np.ndarray:
        if rng is None:
            return np.zeros(shape, dtype=np.float64)
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)

    head_ch = (4 + num_classes + 1) * boxes_per_cell
    layers: list[Layer] = [
        ConvLayer(k=3, stride=2, in_ch=3, out_ch=16, weights=tensor(3, 3, 3, 16), bias=np.zeros(16)),
        ReluLayer(ch=16),
    ]
    for stride, in_ch, out_ch in _DEFAULT_BLOCKS:
        layers.append(DepthwiseLayer(k=3, stride=stride, ch=in_ch, weights=tensor(3, 3, in_ch)))
        layers.append(PointwiseLayer(in_ch=in_ch, out_ch=out_ch, weights=tensor(in_ch, out_ch), bias=np.zeros(out_ch)))
        layers.append(ReluLayer(ch=out_ch))
    layers.append(HeadLayer(in_ch=64, out_ch=head_ch, weights=tensor(64, head_ch), bias=np.zeros(head_ch)))
    layers.append(DepthwiseLayer(k=3, stride=2, ch=64, weights=tensor(3, 3, 64)))
    layers.append(PointwiseLayer(in_ch=64, out_ch=64, weights=tensor(64, 64), bias=np.zeros(64)))
    layers.append(ReluLayer(ch=64))
    layers.append(HeadLayer(in_ch=64, out_ch=head_ch, weights=tensor(64, head_ch), bias=np.zeros(head_ch)))
    return Network(layers=tuple(layers))


@dataclass(frozen=True)
class DetectorScript:
    """Frame-indexed scripted detections, the test double for a model."""

    frames: Mapping[int, tuple[Detection, ...]]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "frames", {int(k): tuple(v) for k, v in dict(self.frames).items()}
        )

    @classmethod
    def from_json(cls, text: str) -> "DetectorScript":
        """Parse ``{"<frame>": [{"label", "score", "box": [x1,y1,x2,y2]}, ...]}``."""
        raw = json.loads(text)
        frames = {}
        for key, items in raw.items():
            frames[int(key)] = tuple(
                Detection(
                    label=item["label"],
                    score=float(item["score"]),
                    box=BoundingBox(*item["box"]),
                )
                for item in items
            )
        return cls(frames=frames)

    def to_json(self) -> str:
        return json.dumps(
            {
                str(k): [
                    {"label": d.label, "score": d.score, "box": list(d.box.as_tuple())}
                    for d in v
                ]
                for k, v in self.frames.items()
            },
            indent=2,
        )


def stub_detect(script: DetectorScript, frame_index: int) -> list[Detection]:
    """Scripted detections for a frame; empty when the index is absent."""
    return list(script.frames.get(frame_index, ()))


class Detector(Protocol):
    """Backend-agnostic detector: stub, tiny net, or a future engine."""

    def detect(self, image: Image | None, frame_index: int) -> list[Detection]: ...


class StubDetector:
    """Replays a :class:`DetectorScript`; ignores pixels entirely."""

    def __init__(self, script: DetectorScript):
        self.script = script

    def detect(self, image: Image | None, frame_index: int) -> list[Detection]:
        return stub_detect(self.script, frame_index)


class NetDetector:
    """Runs the convolutional network end to end on each frame."""

    def __init__(
        self,
        net: Network,
        class_names: Sequence[str],
        anchor_cfg: AnchorConfig | None = None,
        variances: tuple[float, float] = (0.1, 0.2),
        score_threshold: float = 0.5,
        nms_iou_threshold: float = 0.45,
        top_k: int = 100,
    ):
        self.net = net
        self.class_names = tuple(class_names)
        self.cfg = anchor_cfg or AnchorConfig()
        self.variances = variances
        self.score_threshold = score_threshold
        self.nms_iou_threshold = nms_iou_threshold
        self.top_k = top_k
        self.anchors: AnchorSet = generate_anchors(self.cfg)

        grids = net.head_grid_sizes(self.cfg.image_size)
        if grids != tuple(self.cfg.feature_map_sizes):
            raise WeightsError(
                f"head grids {grids} do not match anchor feature maps "
                f"{tuple(self.cfg.feature_map_sizes)}"
            )
        per_slot = 4 + len(self.class_names) + 1
        for layer_idx, head in enumerate(net.heads):
            b = self.cfg.boxes_per_cell(layer_idx)
            if head.out_ch != per_slot * b:
                raise WeightsError(
                    f"head {layer_idx} emits {head.out_ch} channels, expected "
                    f"{per_slot * b} for {b} anchors x {per_slot} values"
                )

    def detect(self, image: Image | None, frame_index: int) -> list[Detection]:
        if image is None:
            raise ValueError("NetDetector needs pixel data, got no image")
        if image.height != self.cfg.image_size or image.width != self.cfg.image_size:
            image = resize_image(image, self.cfg.image_size)
        raw = forward(self.net, image, num_classes=len(self.class_names))
        dets = decode_detections(
            raw,
            self.anchors,
            self.class_names,
            variances=self.variances,
            score_threshold=self.score_threshold,
        )
        return nms(dets, iou_threshold=self.nms_iou_threshold, top_k=self.top_k)
