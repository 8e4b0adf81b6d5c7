"""
Detector Training Module
Anchor and RoI labeling, seeded sampling, RPN / head losses and the per-image
training loop for the two-stage detector.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from detector import (
    BoundingBox,
    Detector,
    anchor_array,
    boxes_to_array,
    encode_boxes,
    pairwise_iou,
    roi_pool_many,
    rpn_forward,
    select_proposals,
)
from errors import NumericError, ValidationError
from sr_training import Adam
from tensor_core import (
    ComputationTape,
    Tensor,
    add,
    backward,
    gather,
    log_softmax,
    mean,
    mul,
    reshape,
    safe_log,
    scale,
    smooth_l1,
    sub,
    sum_all,
)

logger = logging.getLogger(__name__)

# Smooth-L1 transition point for delta regression
SMOOTH_L1_BETA = 1.0 / 9.0

GroundTruth = Tuple[int, BoundingBox]


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 8
    learning_rate: float = 1e-3
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rpn_batch: int = 64
    rpn_positive_fraction: float = 0.5
    roi_foreground_iou: float = 0.5
    roi_batch: int = 32
    roi_positive_fraction: float = 0.25
    pre_nms_k: int = 200
    post_nms_k: int = 30
    rpn_nms_iou: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.rpn_negative_iou < self.rpn_positive_iou <= 1.0:
            raise ValidationError("need 0 <= rpn_negative_iou < rpn_positive_iou <= 1")
        for name in ("rpn_positive_fraction", "roi_positive_fraction", "roi_foreground_iou"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in (0, 1], got {getattr(self, name)}")
        if self.rpn_batch < 1 or self.roi_batch < 1:
            raise ValidationError("sample batch sizes must be positive")


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, positive_iou: float,
                  negative_iou: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Label anchors 1 (object), 0 (background) or -1 (ignored).

    An anchor is positive when its best IoU reaches ``positive_iou`` or when it
    is the best anchor for some ground truth; negative when its best IoU is at
    most ``negative_iou``.

    Returns:
        (labels, index of best-matching ground truth per anchor)
    """
    count = len(anchors)
    if len(gt_boxes) == 0:
        return np.zeros(count, dtype=np.int64), np.zeros(count, dtype=np.int64)
    overlaps = pairwise_iou(anchors, gt_boxes)
    matched = overlaps.argmax(axis=1)
    best = overlaps[np.arange(count), matched]
    labels = np.full(count, -1, dtype=np.int64)
    labels[best <= negative_iou] = 0
    per_gt_best = overlaps.max(axis=0)
    for g, value in enumerate(per_gt_best):
        if value > 0.0:
            winners = np.nonzero(overlaps[:, g] == value)[0]
            labels[winners] = 1
            matched[winners] = g
    labels[best >= positive_iou] = 1
    return labels, matched


def sample_labels(labels: np.ndarray, batch: int, positive_fraction: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded subsample of positive (label >= 1) and negative (label == 0) indices"""
    positives = np.nonzero(labels >= 1)[0]
    negatives = np.nonzero(labels == 0)[0]
    num_pos = min(len(positives), int(batch * positive_fraction))
    if len(positives) > num_pos:
        positives = np.sort(rng.choice(positives, num_pos, replace=False))
    num_neg = min(len(negatives), batch - len(positives))
    if len(negatives) > num_neg:
        negatives = np.sort(rng.choice(negatives, num_neg, replace=False))
    return positives, negatives


def binary_cross_entropy(probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean BCE of probabilities against 0/1 targets, logs clamped"""
    y = Tensor(targets, dtype=probs.dtype)
    not_y = Tensor(1.0 - targets, dtype=probs.dtype)
    log_p = safe_log(probs)
    log_q = safe_log(add(scale(probs, -1.0), 1.0))
    return scale(mean(add(mul(log_p, y), mul(log_q, not_y))), -1.0)


def rpn_loss(rpn_output, anchors: np.ndarray, gts: Sequence[GroundTruth], cfg: DetectorTrainConfig,
             rng: np.random.Generator) -> Tensor:
    """Objectness BCE over sampled anchors plus smooth-L1 on positive anchor deltas"""
    gt_boxes = boxes_to_array([box for _, box in gts])
    labels, matched = label_anchors(anchors, gt_boxes, cfg.rpn_positive_iou, cfg.rpn_negative_iou)
    positives, negatives = sample_labels(labels, cfg.rpn_batch, cfg.rpn_positive_fraction, rng)
    sampled = np.concatenate([positives, negatives])
    targets = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    loss = binary_cross_entropy(gather(rpn_output.flat_objectness(), sampled), targets)
    if len(positives):
        predicted = gather(rpn_output.flat_deltas(), positives)
        wanted = Tensor(encode_boxes(anchors[positives], gt_boxes[matched[positives]]), dtype=predicted.dtype)
        regression = scale(sum_all(smooth_l1(sub(predicted, wanted), SMOOTH_L1_BETA)), 1.0 / len(sampled))
        loss = add(loss, regression)
    return loss


def head_loss(detector: Detector, features: Tensor, proposals: Sequence[BoundingBox],
              gts: Sequence[GroundTruth], cfg: DetectorTrainConfig, rng: np.random.Generator) -> Optional[Tensor]:
    """Cross-entropy on sampled RoIs (proposals plus ground truth) and smooth-L1 on foreground deltas"""
    spec = detector.spec
    gt_boxes = boxes_to_array([box for _, box in gts])
    gt_classes = np.array([cls for cls, _ in gts], dtype=np.int64)
    rois = boxes_to_array(list(proposals)) if proposals else np.zeros((0, 4))
    rois = np.concatenate([rois, gt_boxes]) if len(gt_boxes) else rois
    if len(rois) == 0:
        return None

    if len(gt_boxes):
        overlaps = pairwise_iou(rois, gt_boxes)
        matched = overlaps.argmax(axis=1)
        best = overlaps[np.arange(len(rois)), matched]
        labels = np.where(best >= cfg.roi_foreground_iou, gt_classes[matched], 0)
    else:
        matched = np.zeros(len(rois), dtype=np.int64)
        labels = np.zeros(len(rois), dtype=np.int64)
    foreground, background = sample_labels(labels, cfg.roi_batch, cfg.roi_positive_fraction, rng)
    sampled = np.concatenate([foreground, background])
    if sampled.size == 0:
        return None

    roi_boxes = [BoundingBox.from_array(rois[i]) for i in sampled]
    pooled = roi_pool_many(features, roi_boxes, spec.pool_size, spec.anchors.feature_stride)
    logits, deltas = detector.head(pooled)
    classes = spec.num_classes + 1
    sampled_labels = labels[sampled]
    log_probs = reshape(log_softmax(logits), (len(sampled) * classes,))
    picked = gather(log_probs, np.arange(len(sampled)) * classes + sampled_labels)
    loss = scale(mean(picked), -1.0)

    if len(foreground):
        rows = np.arange(len(foreground))
        flat_deltas = reshape(deltas, (len(sampled) * spec.num_classes, 4))
        predicted = gather(flat_deltas, rows * spec.num_classes + sampled_labels[rows] - 1)
        wanted = encode_boxes(rois[foreground], gt_boxes[matched[foreground]])
        regression = sum_all(smooth_l1(sub(predicted, Tensor(wanted, dtype=predicted.dtype)), SMOOTH_L1_BETA))
        loss = add(loss, scale(regression, 1.0 / len(sampled)))
    return loss


def detector_train_step(detector: Detector, image: np.ndarray, gts: Sequence[GroundTruth],
                        cfg: DetectorTrainConfig, optimizer: Adam, rng: np.random.Generator) -> float:
    """One joint RPN + head update on a single image; returns the loss value"""
    spec = detector.spec
    height, width = image.shape[-2:]
    optimizer.zero_grad()
    with ComputationTape() as tape:
        features = detector.features(image)
        rpn_output = rpn_forward(features, detector.rpn, spec.anchors)
        if not rpn_output.objectness.is_finite():
            raise NumericError("RPN objectness is not finite", tape.first_non_finite())
        anchors = anchor_array(spec.anchors, features.shape[1], features.shape[2])
        loss = rpn_loss(rpn_output, anchors, gts, cfg, rng)
        proposals = select_proposals(rpn_output, anchors, cfg.pre_nms_k, cfg.post_nms_k, cfg.rpn_nms_iou,
                                     image_size=(width, height))
        second = head_loss(detector, features, [p.box for p in proposals], gts, cfg, rng)
        if second is not None:
            loss = add(loss, second)
    if not loss.is_finite():
        raise NumericError("detector loss is not finite", tape.first_non_finite())
    backward(loss, tape)
    optimizer.step()
    return loss.item()


def train_detector(detector: Detector, samples: Sequence[Tuple[np.ndarray, Sequence[GroundTruth]]],
                   cfg: DetectorTrainConfig) -> List[float]:
    """
    Train the detector image by image over seeded shuffled epochs.

    Args:
        samples: (image (C,H,W), ground truths) pairs
        cfg: Thresholds, sampling sizes and schedule

    Returns:
        Mean loss per epoch
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(detector.parameter_list(), lr=cfg.learning_rate)
    history: List[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = [detector_train_step(detector, samples[i][0], samples[i][1], cfg, optimizer, rng) for i in order]
        history.append(float(np.mean(losses)) if losses else 0.0)
        logger.info(f"✓ Detector epoch {epoch + 1}/{cfg.epochs}: mean loss={history[-1]:.5f}")
    return history
