"""
Detector Module
Two-stage detector: shared conv backbone, region proposal network over tiled
anchors, proposal selection with NMS, RoI max-pooling and a fully-connected
classification / box-regression head.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from checkpoint import load_network_state, read_checkpoint, save_network, stored_spec_echo
from errors import CheckpointSpecMismatchError, DomainError, ShapeError, ValidationError
from layers import ConvLayer, LinearLayer, Network
from sr_network import LEAKY_SLOPE, as_batch
from tensor_core import (
    DEFAULT_DTYPE,
    Function,
    Tensor,
    leaky_relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

# Largest log-scale delta accepted by decode (boxes at most ~62x the anchor)
DELTA_CLIP = math.log(1000.0 / 16.0)

BACKBONE_STRIDE = 8


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates (max edges exclusive)"""
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        values = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in values):
            raise ValidationError(f"box coordinates must be finite, got {values}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValidationError(f"box has min > max: {values}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "BoundingBox":
        x_min, y_min, x_max, y_max = (float(v) for v in values)
        return cls(x_min, y_min, x_max, y_max)

    def scaled(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.x_min * factor, self.y_min * factor, self.x_max * factor, self.y_max * factor)

    def clipped(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(min(max(self.x_min, 0.0), width), min(max(self.y_min, 0.0), height),
                           min(max(self.x_max, 0.0), width), min(max(self.y_max, 0.0), height))


@dataclass(frozen=True)
class Detection:
    """Detected object; class 0 is reserved for background"""
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score must lie in [0, 1], got {self.score}")

    def to_line(self) -> str:
        b = self.box
        return f"{self.class_id} {self.score:.6f} {b.x_min:.6f} {b.y_min:.6f} {b.x_max:.6f} {b.y_max:.6f}"

    def scaled(self, factor: float) -> "Detection":
        return Detection(self.box.scaled(factor), self.class_id, self.score)


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    score: float
    anchor_index: int


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor scales are in feature-cell units (multiplied by feature_stride)"""
    scales: Tuple[float, ...] = (8.0, 16.0, 32.0)
    aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    feature_stride: int = BACKBONE_STRIDE

    def __post_init__(self):
        if not self.scales or not self.aspect_ratios:
            raise ValidationError("anchor scales and aspect ratios must be non-empty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ValidationError("anchor scales and aspect ratios must be positive")
        if self.feature_stride < 1:
            raise ValidationError(f"feature_stride must be positive, got {self.feature_stride}")

    @property
    def anchors_per_location(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)


@dataclass
class RpnOutput:
    """objectness (A,Hf,Wf) in (0,1) and deltas (4A,Hf,Wf)"""
    objectness: Tensor
    deltas: Tensor

    @property
    def num_anchors(self) -> int:
        return self.objectness.size

    def flat_objectness(self) -> Tensor:
        """(K,) ordered by anchor index (i*Wf + j)*A + a"""
        return reshape(transpose(self.objectness, (1, 2, 0)), (self.objectness.size,))

    def flat_deltas(self) -> Tensor:
        """(K, 4) ordered like flat_objectness"""
        a, hf, wf = self.objectness.shape
        per_anchor = reshape(self.deltas, (a, 4, hf, wf))
        return reshape(transpose(per_anchor, (2, 3, 0, 1)), (a * hf * wf, 4))


# ---------------------------------------------------------------------------
# Box geometry
# ---------------------------------------------------------------------------

def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; 0 for disjoint or degenerate boxes"""
    inter_w = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    inter_h = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """(N,4) x (M,4) -> (N,M) IoU matrix, same arithmetic as iou()"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    inter_w = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    inter_h = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = inter_w * inter_h
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def boxes_to_array(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack([box.as_array() for box in boxes])


def anchor_array(cfg: AnchorConfig, feature_h: int, feature_w: int) -> np.ndarray:
    """(Hf*Wf*A, 4) anchors, row-major over locations, then scales, then ratios"""
    if feature_h < 1 or feature_w < 1:
        raise ShapeError(f"feature map must be non-empty, got {feature_h}x{feature_w}")
    stride = cfg.feature_stride
    shapes = np.array([[s * stride * math.sqrt(r), s * stride / math.sqrt(r)]
                       for s in cfg.scales for r in cfg.aspect_ratios])
    rows, cols = np.meshgrid(np.arange(feature_h), np.arange(feature_w), indexing="ij")
    cx = ((cols.reshape(-1) + 0.5) * stride)[:, None]
    cy = ((rows.reshape(-1) + 0.5) * stride)[:, None]
    half_w = shapes[None, :, 0] / 2.0
    half_h = shapes[None, :, 1] / 2.0
    anchors = np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=-1)
    return anchors.reshape(-1, 4)


def generate_anchors(cfg: AnchorConfig, feature_h: int, feature_w: int) -> List[BoundingBox]:
    return [BoundingBox.from_array(row) for row in anchor_array(cfg, feature_h, feature_w)]


def encode_boxes(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorized (tx, ty, tw, th) of targets relative to anchors"""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    wt = targets[:, 2] - targets[:, 0]
    ht = targets[:, 3] - targets[:, 1]
    if np.any(wa <= 0) or np.any(ha <= 0):
        raise DomainError("anchor must have positive width and height", index=(int(np.argmin(np.minimum(wa, ha))),))
    if np.any(wt <= 0) or np.any(ht <= 0):
        raise DomainError("target must have positive width and height", index=(int(np.argmin(np.minimum(wt, ht))),))
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    cxt = targets[:, 0] + 0.5 * wt
    cyt = targets[:, 1] + 0.5 * ht
    return np.stack([(cxt - cxa) / wa, (cyt - cya) / ha, np.log(wt / wa), np.log(ht / ha)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray,
                 image_size: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Inverse of encode_boxes; clipped to (width, height) when image_size is given"""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    wa = anchors[:, 2] - anchors[:, 0]
    ha = anchors[:, 3] - anchors[:, 1]
    cxa = anchors[:, 0] + 0.5 * wa
    cya = anchors[:, 1] + 0.5 * ha
    cx = deltas[:, 0] * wa + cxa
    cy = deltas[:, 1] * ha + cya
    w = wa * np.exp(np.minimum(deltas[:, 2], DELTA_CLIP))
    h = ha * np.exp(np.minimum(deltas[:, 3], DELTA_CLIP))
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        width, height = image_size
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return boxes


def encode_box(anchor: BoundingBox, target: BoundingBox) -> Tuple[float, float, float, float]:
    return tuple(float(v) for v in encode_boxes(anchor.as_array(), target.as_array())[0])


def decode_box(anchor: BoundingBox, deltas: Sequence[float],
               image_size: Optional[Tuple[float, float]] = None) -> BoundingBox:
    if anchor.width <= 0 or anchor.height <= 0:
        raise DomainError("anchor must have positive width and height")
    return BoundingBox.from_array(decode_boxes(anchor.as_array(), np.asarray(deltas), image_size)[0])


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> List[int]:
    """
    Greedy non-maximum suppression.

    Visits boxes by descending score (ties: lower index first) and drops every
    remaining box whose IoU with a kept box exceeds ``iou_threshold``.

    Returns:
        Indices of kept boxes in visiting order
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    count = len(scores)
    if count == 0:
        return []
    order = np.lexsort((np.arange(count), -scores))
    overlaps = pairwise_iou(boxes, boxes)
    suppressed = np.zeros(count, dtype=bool)
    keep: List[int] = []
    for index in order:
        if suppressed[index]:
            continue
        keep.append(int(index))
        suppressed |= overlaps[index] > iou_threshold
    return keep


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    input_channels: int = 3
    backbone_channels: Tuple[int, int, int] = (16, 32, 32)
    rpn_channels: int = 32
    pool_size: int = 4
    hidden_units: int = 64
    num_classes: int = 3
    anchors: AnchorConfig = field(default_factory=AnchorConfig)

    def __post_init__(self):
        if len(self.backbone_channels) != 3 or min(self.backbone_channels) < 1:
            raise ValidationError(f"backbone needs three positive channel counts, got {self.backbone_channels}")
        for name in ("input_channels", "rpn_channels", "pool_size", "hidden_units", "num_classes"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.anchors.feature_stride != BACKBONE_STRIDE:
            raise ValidationError(f"backbone stride is {BACKBONE_STRIDE}, anchors use {self.anchors.feature_stride}")

    def echo(self) -> np.ndarray:
        values = [self.input_channels, *self.backbone_channels, self.rpn_channels, self.pool_size,
                  self.hidden_units, self.num_classes, self.anchors.feature_stride,
                  len(self.anchors.scales), *self.anchors.scales,
                  len(self.anchors.aspect_ratios), *self.anchors.aspect_ratios]
        return np.array(values, dtype=np.float32)

    @classmethod
    def from_echo(cls, echo: np.ndarray) -> "DetectorSpec":
        values = echo.tolist()
        try:
            n_scales = int(values[9])
            scales = tuple(round(float(v), 6) for v in values[10:10 + n_scales])
            n_ratios = int(values[10 + n_scales])
            ratios = tuple(round(float(v), 6) for v in values[11 + n_scales:11 + n_scales + n_ratios])
        except IndexError as exc:
            raise CheckpointSpecMismatchError(f"malformed detector spec echo {values}") from exc
        if len(values) != 11 + n_scales + n_ratios:
            raise CheckpointSpecMismatchError(f"malformed detector spec echo {values}")
        ints = [int(v) for v in values[:9]]
        return cls(input_channels=ints[0], backbone_channels=tuple(ints[1:4]), rpn_channels=ints[4],
                   pool_size=ints[5], hidden_units=ints[6], num_classes=ints[7],
                   anchors=AnchorConfig(scales, ratios, ints[8]))


@dataclass(frozen=True)
class DetectConfig:
    """Inference thresholds"""
    pre_nms_k: int = 200
    post_nms_k: int = 30
    rpn_nms_iou: float = 0.7
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    min_size: float = 1.0

    def __post_init__(self):
        if self.pre_nms_k < 1 or self.post_nms_k < 1:
            raise ValidationError("proposal counts must be positive")
        for name in ("rpn_nms_iou", "nms_iou"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {getattr(self, name)}")
        if not 0.0 <= self.score_threshold <= 1.0:
            raise ValidationError(f"score_threshold must lie in [0, 1], got {self.score_threshold}")


class Backbone:
    """Three 3x3 stride-2 convs with leaky ReLU (overall stride 8)"""

    def __init__(self, input_channels: int, channels: Tuple[int, ...], rng, dtype):
        self.convs: List[ConvLayer] = []
        previous = input_channels
        for out_channels in channels:
            self.convs.append(ConvLayer(previous, out_channels, 3, stride=2, padding=1, rng=rng, dtype=dtype))
            previous = out_channels

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = leaky_relu(conv(x), LEAKY_SLOPE)
        return x

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for index, conv in enumerate(self.convs):
            yield from conv.named_parameters(f"{prefix}.{index}")


class RpnHead:
    """3x3 conv with leaky ReLU, then sibling 1x1 objectness and delta convs"""

    def __init__(self, in_channels: int, mid_channels: int, anchors_per_location: int, rng, dtype):
        self.conv = ConvLayer(in_channels, mid_channels, 3, rng=rng, dtype=dtype)
        self.cls = ConvLayer(mid_channels, anchors_per_location, 1, rng=rng, dtype=dtype)
        self.bbox = ConvLayer(mid_channels, 4 * anchors_per_location, 1, rng=rng, dtype=dtype)

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield from self.conv.named_parameters(f"{prefix}.conv")
        yield from self.cls.named_parameters(f"{prefix}.cls")
        yield from self.bbox.named_parameters(f"{prefix}.bbox")


class DetectionHead:
    """flatten -> fc1 -> fc2 -> (class logits, per-class deltas)"""

    def __init__(self, in_features: int, hidden_units: int, num_classes: int, rng, dtype):
        self.num_classes = num_classes
        self.in_features = in_features
        self.fc1 = LinearLayer(in_features, hidden_units, rng=rng, dtype=dtype)
        self.fc2 = LinearLayer(hidden_units, hidden_units, rng=rng, dtype=dtype)
        self.cls = LinearLayer(hidden_units, num_classes + 1, rng=rng, dtype=dtype)
        self.bbox = LinearLayer(hidden_units, 4 * num_classes, rng=rng, dtype=dtype)

    def __call__(self, pooled: Tensor) -> Tuple[Tensor, Tensor]:
        flat = reshape(pooled, (pooled.shape[0], pooled.size // pooled.shape[0]))
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"head expects {self.in_features} pooled features, got {flat.shape[1]}")
        hidden = leaky_relu(self.fc2(leaky_relu(self.fc1(flat), LEAKY_SLOPE)), LEAKY_SLOPE)
        return self.cls(hidden), self.bbox(hidden)

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        for name in ("fc1", "fc2", "cls", "bbox"):
            yield from getattr(self, name).named_parameters(f"{prefix}.{name}")


class Detector(Network):
    spec_key = "spec.detector"

    def __init__(self, spec: DetectorSpec, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.spec = spec
        self.backbone = Backbone(spec.input_channels, spec.backbone_channels, rng, dtype)
        self.rpn = RpnHead(spec.backbone_channels[-1], spec.rpn_channels,
                           spec.anchors.anchors_per_location, rng, dtype)
        self.head = DetectionHead(spec.backbone_channels[-1] * spec.pool_size ** 2, spec.hidden_units,
                                  spec.num_classes, rng, dtype)

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.backbone.named_parameters("backbone")
        yield from self.rpn.named_parameters("rpn")
        yield from self.head.named_parameters("head")

    def features(self, image) -> Tensor:
        """(C,H,W) image -> (C_f, Hf, Wf) backbone features"""
        batch, _ = as_batch(image, dtype=self.dtype)
        if batch.shape[0] != 1:
            raise ShapeError(f"detector runs on one image at a time, got batch {batch.shape[0]}")
        if batch.shape[1] != self.spec.input_channels:
            raise ShapeError(f"detector expects {self.spec.input_channels} channels, got {batch.shape[1]}")
        out = self.backbone(batch)
        return reshape(out, out.shape[1:])


def build_detector(spec: DetectorSpec, seed: int, dtype=DEFAULT_DTYPE) -> Detector:
    return Detector(spec, np.random.default_rng(seed), dtype)


def rpn_forward(features: Tensor, rpn: RpnHead, cfg: AnchorConfig) -> RpnOutput:
    """(C,Hf,Wf) features -> objectness (A,Hf,Wf) and deltas (4A,Hf,Wf)"""
    if features.ndim == 4:
        if features.shape[0] != 1:
            raise ShapeError(f"rpn_forward expects a single feature map, got batch {features.shape[0]}")
        features = reshape(features, features.shape[1:])
    if features.ndim != 3:
        raise ShapeError(f"rpn_forward expects (C,Hf,Wf) features, got {features.shape}")
    if rpn.cls.out_channels != cfg.anchors_per_location:
        raise ShapeError(f"RPN has {rpn.cls.out_channels} anchors per location, config has {cfg.anchors_per_location}")
    hidden = leaky_relu(rpn.conv(features), LEAKY_SLOPE)
    return RpnOutput(objectness=sigmoid(rpn.cls(hidden)), deltas=rpn.bbox(hidden))


def select_proposals(rpn: RpnOutput, anchors, pre_nms_k: int, post_nms_k: int, nms_iou: float,
                     image_size: Optional[Tuple[float, float]] = None, min_size: float = 1.0,
                     feature_stride: int = BACKBONE_STRIDE) -> List[Proposal]:
    """
    Decode, clip, filter small boxes, keep top pre_nms_k, NMS, keep top post_nms_k.

    Args:
        anchors: (K,4) array or list of BoundingBox ordered by anchor index
        image_size: (width, height) for clipping; defaults to the feature map extent

    Returns:
        Proposals by descending score (ties: lower anchor index first)
    """
    anchors = boxes_to_array(anchors) if isinstance(anchors, list) else np.asarray(anchors, dtype=np.float64)
    scores = rpn.flat_objectness().data.astype(np.float64)
    deltas = rpn.flat_deltas().data
    if len(anchors) != len(scores):
        raise ShapeError(f"{len(anchors)} anchors for {len(scores)} RPN outputs")
    if image_size is None:
        _, hf, wf = rpn.objectness.shape
        image_size = (wf * feature_stride, hf * feature_stride)
    boxes = decode_boxes(anchors, deltas, image_size)
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    valid = np.nonzero((widths >= min_size) & (heights >= min_size))[0]
    if valid.size == 0:
        return []
    order = valid[np.lexsort((valid, -scores[valid]))][:pre_nms_k]
    keep = nms(boxes[order], scores[order], nms_iou)[:post_nms_k]
    return [Proposal(BoundingBox.from_array(boxes[order[k]]), float(scores[order[k]]), int(order[k])) for k in keep]


# ---------------------------------------------------------------------------
# RoI pooling
# ---------------------------------------------------------------------------

def roi_cells(roi: BoundingBox, feature_stride: int, feature_h: int, feature_w: int) -> Tuple[int, int, int, int]:
    """Quantize a pixel box to feature cells [x0, x1) x [y0, y1), clipped to the map"""
    x0 = min(max(math.floor(roi.x_min / feature_stride), 0), feature_w)
    y0 = min(max(math.floor(roi.y_min / feature_stride), 0), feature_h)
    x1 = min(max(math.ceil(roi.x_max / feature_stride), 0), feature_w)
    y1 = min(max(math.ceil(roi.y_max / feature_stride), 0), feature_h)
    if x1 <= x0 or y1 <= y0:
        raise DomainError(f"RoI {roi} lies outside the {feature_h}x{feature_w} feature map")
    return x0, y0, x1, y1


def bin_edges(start: int, length: int, pool: int) -> List[Tuple[int, int]]:
    """Integer edges floor(start + b*len/pool), ceil(start + (b+1)*len/pool)"""
    return [(start + (b * length) // pool, start + -((-(b + 1) * length) // pool)) for b in range(pool)]


class RoiPool(Function):
    name = "roi_pool"

    def forward(self, features, cells=(), pool=1):
        channels, fh, fw = features.shape
        out = np.zeros((len(cells), channels, pool, pool), dtype=features.dtype)
        argmax = np.full((len(cells), channels, pool, pool), -1, dtype=np.int64)
        for r, (x0, y0, x1, y1) in enumerate(cells):
            for py, (ys, ye) in enumerate(bin_edges(y0, y1 - y0, pool)):
                for px, (xs, xe) in enumerate(bin_edges(x0, x1 - x0, pool)):
                    if ye <= ys or xe <= xs:
                        continue
                    region = features[:, ys:ye, xs:xe].reshape(channels, -1)
                    local = region.argmax(axis=1)
                    out[r, :, py, px] = region[np.arange(channels), local]
                    bin_w = xe - xs
                    argmax[r, :, py, px] = (ys + local // bin_w) * fw + xs + local % bin_w
        self.saved = (features.shape, argmax)
        return out

    def backward(self, grad):
        shape, argmax = self.saved
        channels = shape[0]
        flat = np.zeros((channels, shape[1] * shape[2]), dtype=grad.dtype)
        mask = argmax >= 0
        channel_index = np.broadcast_to(np.arange(channels)[None, :, None, None], argmax.shape)
        np.add.at(flat, (channel_index[mask], argmax[mask]), grad[mask])
        return (flat.reshape(shape),)


def roi_pool_many(features: Tensor, rois: Sequence[BoundingBox], pool: int, feature_stride: int) -> Tensor:
    """Max-pool each RoI to (C, pool, pool); returns (R, C, pool, pool)"""
    if features.ndim != 3:
        raise ShapeError(f"roi_pool expects (C,Hf,Wf) features, got {features.shape}")
    if pool < 1 or feature_stride < 1:
        raise ShapeError(f"pool and feature_stride must be positive, got {pool}, {feature_stride}")
    _, fh, fw = features.shape
    cells = tuple(roi_cells(roi, feature_stride, fh, fw) for roi in rois)
    return RoiPool.apply(features, cells=cells, pool=pool)


def roi_pool(features: Tensor, roi: BoundingBox, pool: int, feature_stride: int) -> Tensor:
    pooled = roi_pool_many(features, [roi], pool, feature_stride)
    return reshape(pooled, pooled.shape[1:])


def detection_head(pooled: Tensor, head: DetectionHead, num_classes: int) -> Tuple[Tensor, Tensor]:
    """
    Class probabilities (softmax over num_classes + 1, background first) and
    per-class box deltas (4 * num_classes) for (C,P,P) or (R,C,P,P) input.
    """
    if head.num_classes != num_classes:
        raise ShapeError(f"head was built for {head.num_classes} classes, asked for {num_classes}")
    single = pooled.ndim == 3
    batch = reshape(pooled, (1, *pooled.shape)) if single else pooled
    if batch.ndim != 4:
        raise ShapeError(f"pooled features must be (C,P,P) or (R,C,P,P), got {pooled.shape}")
    logits, deltas = head(batch)
    probs = softmax(logits)
    if single:
        return reshape(probs, (num_classes + 1,)), reshape(deltas, (4 * num_classes,))
    return probs, deltas


def detect(image, detector: Detector, config: DetectConfig = DetectConfig()) -> List[Detection]:
    """
    Full inference: backbone, RPN, proposals, RoI pooling, head, per-class NMS.

    Returns:
        Detections with score >= config.score_threshold, by descending score
    """
    image_tensor = image if isinstance(image, Tensor) else Tensor(np.asarray(image), dtype=detector.dtype)
    height, width = image_tensor.shape[-2:]
    spec = detector.spec
    features = detector.features(image_tensor)
    rpn = rpn_forward(features, detector.rpn, spec.anchors)
    anchors = anchor_array(spec.anchors, features.shape[1], features.shape[2])
    proposals = select_proposals(rpn, anchors, config.pre_nms_k, config.post_nms_k, config.rpn_nms_iou,
                                 image_size=(width, height), min_size=config.min_size)
    if not proposals:
        return []

    pooled = roi_pool_many(features, [p.box for p in proposals], spec.pool_size, spec.anchors.feature_stride)
    probs, deltas = detection_head(pooled, detector.head, spec.num_classes)
    probs = probs.data.astype(np.float64)
    deltas = deltas.data.reshape(len(proposals), spec.num_classes, 4)
    proposal_boxes = boxes_to_array([p.box for p in proposals])

    candidates: List[Detection] = []
    for class_id in range(1, spec.num_classes + 1):
        rows = np.nonzero(probs[:, class_id] >= config.score_threshold)[0]
        if rows.size == 0:
            continue
        boxes = decode_boxes(proposal_boxes[rows], deltas[rows, class_id - 1], image_size=(width, height))
        scores = probs[rows, class_id]
        for k in nms(boxes, scores, config.nms_iou):
            candidates.append(Detection(BoundingBox.from_array(boxes[k]), class_id, min(float(scores[k]), 1.0)))
    # stable sort keeps class order, then NMS order, for equal scores
    return sorted(candidates, key=lambda d: -d.score)


def save_detector(detector: Detector, path: Union[str, Path]) -> None:
    save_network(detector, path)


def load_detector(path: Union[str, Path], spec: Optional[DetectorSpec] = None, dtype=DEFAULT_DTYPE) -> Detector:
    """Load a detector; the DetectorSpec defaults to the echo stored in the checkpoint"""
    if spec is None:
        spec = DetectorSpec.from_echo(stored_spec_echo(read_checkpoint(path), Detector.spec_key))
    detector = Detector(spec, np.random.default_rng(0), dtype)
    load_network_state(detector, path)
    return detector
