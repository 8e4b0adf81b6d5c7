"""
Evaluation Metrics Module
Greedy IoU matching, precision / recall / detection accuracy, all-point
interpolated AP, PSNR, and the fixed-width experiment report with CSV export.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from detector import BoundingBox, Detection, iou
from errors import DomainError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

GroundTruth = Tuple[int, BoundingBox]
ImageResult = Tuple[Sequence[Detection], Sequence[GroundTruth]]

ACCURACY_FOOTER = "Accuracy = TP / (TP + FP + FN), the detection Jaccard index; matches need IoU >= {iou:g}."
REPORT_TITLE = "EXPERIMENT REPORT"
TABLE_HEADERS = ("Experiment", "Method", "Accuracy (%)", "Precision (%)", "Recall (%)", "AP (%)")
CSV_HEADER = ("experiment", "accuracy_pct", "precision_pct", "recall_pct", "ap_pct")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: List[Tuple[int, int, float]] = field(default_factory=list)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.pairs + other.pairs)


def _score_order(dets: Sequence[Detection]) -> List[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> MatchResult:
    """
    Greedy matching by descending detection score.

    Each detection takes the unmatched same-class ground truth with the highest
    IoU, provided it reaches ``iou_threshold`` (ties: lower gt index).
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValidationError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    taken = [False] * len(gts)
    pairs: List[Tuple[int, int, float]] = []
    for d in _score_order(dets):
        best_gt, best_iou = -1, iou_threshold
        for g, (cls, box) in enumerate(gts):
            if taken[g] or cls != dets[d].class_id:
                continue
            overlap = iou(dets[d].box, box)
            if overlap >= best_iou and (best_gt < 0 or overlap > best_iou):
                best_gt, best_iou = g, overlap
        if best_gt >= 0:
            taken[best_gt] = True
            pairs.append((d, best_gt, best_iou))
    tp = len(pairs)
    return MatchResult(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp, pairs=pairs)


def prf_metrics(m: MatchResult) -> Tuple[float, float, float]:
    """(precision, recall, accuracy) with accuracy = tp / (tp + fp + fn)"""
    precision = m.tp / (m.tp + m.fp) if m.tp + m.fp else 0.0
    recall = m.tp / (m.tp + m.fn) if m.tp + m.fn else 0.0
    denominator = m.tp + m.fp + m.fn
    accuracy = m.tp / denominator if denominator else 1.0
    return precision, recall, accuracy


def _interpolated_area(hits: Sequence[bool], total_gts: int) -> float:
    if not hits:
        return 0.0
    flags = np.asarray(hits, dtype=np.float64)
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = np.concatenate([[0.0], tp / total_gts, [1.0]])
    precision = np.concatenate([[0.0], tp / (tp + fp), [0.0]])
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    steps = np.nonzero(recall[1:] != recall[:-1])[0]
    return float(np.sum((recall[steps + 1] - recall[steps]) * precision[steps + 1]))


def average_precision_images(images: Sequence[ImageResult], iou_threshold: float = 0.5) -> float:
    """
    All-point interpolated AP over several images.

    Detections are ranked globally by score (ties: image order, then list
    order) and matched greedily within their own image.
    """
    total_gts = sum(len(gts) for _, gts in images)
    total_dets = sum(len(dets) for dets, _ in images)
    if total_gts == 0:
        return 1.0 if total_dets == 0 else 0.0

    ranked = sorted(((-det.score, image_index, det_index)
                     for image_index, (dets, _) in enumerate(images)
                     for det_index, det in enumerate(dets)))
    taken = [[False] * len(gts) for _, gts in images]
    hits: List[bool] = []
    for _, image_index, det_index in ranked:
        det = images[image_index][0][det_index]
        gts = images[image_index][1]
        best_gt, best_iou = -1, iou_threshold
        for g, (cls, box) in enumerate(gts):
            if taken[image_index][g] or cls != det.class_id:
                continue
            overlap = iou(det.box, box)
            if overlap >= best_iou and (best_gt < 0 or overlap > best_iou):
                best_gt, best_iou = g, overlap
        if best_gt >= 0:
            taken[image_index][best_gt] = True
        hits.append(best_gt >= 0)
    return _interpolated_area(hits, total_gts)


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5) -> float:
    return average_precision_images([(dets, gts)], iou_threshold)


def mean_average_precision(images: Sequence[ImageResult], iou_threshold: float = 0.5) -> float:
    """Per-class AP averaged over the classes that have ground truth"""
    classes = sorted({cls for _, gts in images for cls, _ in gts})
    if not classes:
        return average_precision_images(images, iou_threshold)
    values = []
    for class_id in classes:
        per_class = [([d for d in dets if d.class_id == class_id], [g for g in gts if g[0] == class_id])
                     for dets, gts in images]
        values.append(average_precision_images(per_class, iou_threshold))
    return float(np.mean(values))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images"""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    if peak <= 0:
        raise DomainError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"


@dataclass(frozen=True)
class ExperimentResult:
    """One report row; metric values are percentages, None when not applicable"""
    name: str
    accuracy: Optional[float] = None
    precision: Optional[float] = None
    recall: Optional[float] = None
    ap: Optional[float] = None

    @classmethod
    def from_images(cls, name: str, images: Sequence[ImageResult], iou_threshold: float = 0.5) -> "ExperimentResult":
        total = MatchResult(0, 0, 0)
        for dets, gts in images:
            total = total + match_detections(dets, gts, iou_threshold)
        precision, recall, accuracy = prf_metrics(total)
        ap = average_precision_images(images, iou_threshold)
        return cls(name, 100.0 * accuracy, 100.0 * precision, 100.0 * recall, 100.0 * ap)

    def values(self) -> Tuple[Optional[float], ...]:
        return self.accuracy, self.precision, self.recall, self.ap


def evaluate_detections(name: str, images: Sequence[ImageResult], iou_threshold: float = 0.5) -> ExperimentResult:
    return ExperimentResult.from_images(name, images, iou_threshold)


def format_percent(value: Optional[float]) -> str:
    """One decimal, integral values without one; '-' when absent"""
    if value is None:
        return "-"
    rounded = round(value, 1)
    if rounded == int(rounded):
        return str(int(rounded))
    return f"{rounded:.1f}"


@dataclass
class MetricsReport:
    rows: List[ExperimentResult]
    iou_threshold: float = 0.5
    notes: List[str] = field(default_factory=list)

    def table_rows(self) -> List[Tuple[str, ...]]:
        return [(str(index), row.name, *(format_percent(v) for v in row.values()))
                for index, row in enumerate(self.rows, start=1)]

    def render(self) -> str:
        """Fixed-width ASCII table"""
        cells = [TABLE_HEADERS, *self.table_rows()]
        widths = [max(len(row[c]) for row in cells) for c in range(len(TABLE_HEADERS))]
        total_width = sum(widths) + 2 * (len(widths) - 1)

        def line(row: Sequence[str]) -> str:
            return "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()

        lines = [REPORT_TITLE, "=" * total_width, line(TABLE_HEADERS), "-" * total_width]
        lines.extend(line(row) for row in cells[1:])
        lines.append("=" * total_width)
        lines.append(ACCURACY_FOOTER.format(iou=self.iou_threshold))
        lines.extend(self.notes)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow([row.name, *("" if v is None else format_percent(v) for v in row.values())])
        return buffer.getvalue()

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")

    def write_table(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render(), encoding="utf-8")


def build_report(rows: Sequence[ExperimentResult], iou_threshold: float = 0.5,
                 notes: Sequence[str] = ()) -> MetricsReport:
    """
    Validate experiment rows and wrap them in a renderable report.

    Raises:
        ValidationError: no rows, an empty name, or a value outside [0, 100]
    """
    if not rows:
        raise ValidationError("report needs at least one experiment row")
    for row in rows:
        if not row.name.strip():
            raise ValidationError("experiment name must not be empty")
        for value in row.values():
            if value is not None and not 0.0 <= value <= 100.0:
                raise ValidationError(f"value {value} of '{row.name}' outside [0, 100]")
    return MetricsReport(list(rows), iou_threshold, list(notes))
