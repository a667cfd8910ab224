"""Detection AP (VOC style, with ignore regions), size-stratified mAP, and
segmentation metrics."""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from stuffnet.boxgeom import Box, boxes_to_array, iou_matrix
from stuffnet.config import (
    EvalSettings,
    InferenceSettings,
    ProposalSettings,
    SizeBinLiteral,
    desk_size_ceilings,
)
from stuffnet.errors import DatasetFormatError, ShapeError
from stuffnet.layers import IGNORE_LABEL
from stuffnet.metrics import get_metrics_collector
from stuffnet.model import Model, detect, segment
from stuffnet.utils import atomic_write_text, format_table

if TYPE_CHECKING:
    from stuffnet.data import SceneSample

logger = None

SIZE_BINS: tuple[str, ...] = ("all", "small", "medium", "large")


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


class Verdict(str, Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"


@dataclass(frozen=True)
class SizeBins:
    """Area ceilings (px²): small < ``small_ceiling`` <= medium < ``medium_ceiling`` <= large."""

    small_ceiling: float = 32.0 * 32.0
    medium_ceiling: float = 96.0 * 96.0

    def __post_init__(self) -> None:
        if not 0 < self.small_ceiling < self.medium_ceiling:
            raise ValueError(
                f"size bins need 0 < small ({self.small_ceiling}) < medium ({self.medium_ceiling})"
            )

    @classmethod
    def from_settings(cls, settings: EvalSettings) -> SizeBins:
        return cls(settings.small_ceiling, settings.medium_ceiling)

    @classmethod
    def for_image_size(cls, image_size: int) -> SizeBins:
        """Ceilings scaled proportionally to the image side."""
        return cls(*desk_size_ceilings(image_size))

    def bin_of(self, area: float) -> str:
        if area < self.small_ceiling:
            return "small"
        if area < self.medium_ceiling:
            return "medium"
        return "large"

    def contains(self, size_bin: str | None, area: float) -> bool:
        if size_bin in (None, "all"):
            return True
        if size_bin not in SIZE_BINS:
            raise ValueError(f"unknown size bin {size_bin!r}; expected one of {SIZE_BINS}")
        return self.bin_of(area) == size_bin


def _score(box: Box) -> float:
    return float(box.score) if box.score is not None else 0.0


def match_detections(
    dets: Sequence[Box], gts: Sequence[Box], iou_thresh: float = 0.5
) -> list[Verdict]:
    """Greedy matching of one class's detections in one image.

    Detections are visited by descending score (ties: lower index first). Each
    takes the highest-IoU unmatched non-ignore ground truth at IoU >= ``iou_thresh``
    (TP); failing that, an ignore ground truth at that IoU makes it IGNORED;
    otherwise FP.

    Returns:
        One verdict per detection, in input order
    """
    verdicts = [Verdict.FP] * len(dets)
    if not dets:
        return verdicts
    if not gts:
        return verdicts
    ious = iou_matrix(boxes_to_array(dets), boxes_to_array(gts))
    ignore = np.array([g.ignore for g in gts], dtype=bool)
    matched = np.zeros(len(gts), dtype=bool)
    order = np.argsort([-_score(d) for d in dets], kind="stable")
    for i in order:
        row = ious[i]
        open_gt = (~ignore) & (~matched) & (row >= iou_thresh)
        if open_gt.any():
            j = int(np.argmax(np.where(open_gt, row, -1.0)))
            matched[j] = True
            verdicts[i] = Verdict.TP
        elif (ignore & (row >= iou_thresh)).any():
            verdicts[i] = Verdict.IGNORED
    return verdicts


def average_precision(
    verdicts: Sequence[Verdict | str],
    scores: Sequence[float] | np.ndarray,
    n_gt: int,
    method: str = "all_points",
) -> float:
    """Area under the interpolated precision/recall curve.

    IGNORED verdicts are dropped before the curve is built.

    Example:
        >>> round(average_precision(["tp", "fp", "tp"], [0.9, 0.8, 0.7], 2), 6)
        0.833333
    """
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    if len(verdicts) != len(scores):
        raise ValueError(f"{len(verdicts)} verdicts but {len(scores)} scores")
    if n_gt == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    kinds = [Verdict(verdicts[i]) for i in order]
    kinds = [k for k in kinds if k is not Verdict.IGNORED]
    if not kinds:
        return 0.0
    is_tp = np.array([k is Verdict.TP for k in kinds], dtype=np.float64)
    tp = np.cumsum(is_tp)
    fp = np.cumsum(1.0 - is_tp)
    recall = tp / n_gt
    precision = tp / (tp + fp)

    if method == "eleven_point":
        points = []
        for t in np.linspace(0.0, 1.0, 11):
            reached = precision[recall >= t - 1e-12]
            points.append(reached.max() if reached.size else 0.0)
        return float(np.mean(points))
    if method != "all_points":
        raise ValueError(f"unknown AP method {method!r}")

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class SegMetrics:
    """Confusion-matrix segmentation metrics (rows: ground truth, columns: prediction)."""

    confusion: np.ndarray
    per_class_iou: dict[int, float]
    mean_iou: float
    pixel_accuracy: float


def confusion_matrix(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = IGNORE_LABEL
) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_label
    p, g = pred[keep], gt[keep]
    for name, arr in (("prediction", p), ("ground truth", g)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels must lie in [0, {num_classes})")
    counts = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def metrics_from_confusion(confusion: np.ndarray) -> SegMetrics:
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = {int(k): float(tp[k] / union[k]) for k in np.flatnonzero(union > 0)}
    total = int(confusion.sum())
    return SegMetrics(
        confusion=confusion,
        per_class_iou=per_class,
        mean_iou=float(np.mean(list(per_class.values()))) if per_class else 0.0,
        pixel_accuracy=float(tp.sum() / total) if total else 0.0,
    )


def seg_metrics(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_label: int = IGNORE_LABEL
) -> SegMetrics:
    """Per-class IoU, mean IoU over classes present in either map, and pixel accuracy.

    Raises:
        ShapeError: Maps of different dims
        ValueError: A label outside ``[0, num_classes)`` (ignore label excepted)
    """
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes, ignore_label))


@dataclass
class EvalReport:
    """Per-class AP and mAP for one size bin, plus optional segmentation metrics."""

    per_class_ap: dict[int, float]
    mean_ap: float
    num_gt: dict[int, int]
    true_positives: dict[int, int]
    class_names: dict[int, str] = field(default_factory=dict)
    size_bin: str = "all"
    seg: SegMetrics | None = None

    @property
    def is_empty(self) -> bool:
        """No ground truth in the evaluated bin."""
        return not any(self.num_gt.values())

    def name_of(self, class_id: int) -> str:
        return self.class_names.get(class_id, str(class_id))


def _sorted_dets(dets: Iterable[Box]) -> list[Box]:
    return sorted(dets, key=lambda b: (-_score(b), b.coords()))


def evaluate_map(
    detections: Mapping[str, Sequence[Box]],
    ground_truth: Mapping[str, Sequence[Box]],
    classes: Sequence[int],
    size_bin: SizeBinLiteral | str | None = None,
    bins: SizeBins | None = None,
    iou_thresh: float = 0.5,
    method: str = "all_points",
    class_names: Mapping[int, str] | None = None,
) -> EvalReport:
    """mAP over ``classes`` for a set of images keyed by image id.

    With a ``size_bin`` other than ``"all"``, ground truth outside the bin is
    flagged ignore before matching. mAP averages classes with at least one
    non-ignore ground truth and is 0 when there are none.
    """
    bins = bins or SizeBins()
    size_bin = size_bin or "all"
    image_ids = sorted(set(ground_truth) | set(detections))
    per_class_ap: dict[int, float] = {}
    num_gt: dict[int, int] = {}
    true_positives: dict[int, int] = {}

    for cls in classes:
        verdicts: list[Verdict] = []
        scores: list[float] = []
        n_gt = 0
        for image_id in image_ids:
            gts = [
                g if bins.contains(size_bin, g.area) else g.with_ignore()
                for g in ground_truth.get(image_id, ())
                if g.class_id == cls
            ]
            n_gt += sum(not g.ignore for g in gts)
            dets = _sorted_dets(d for d in detections.get(image_id, ()) if d.class_id == cls)
            verdicts += match_detections(dets, gts, iou_thresh)
            scores += [_score(d) for d in dets]
        num_gt[cls] = n_gt
        true_positives[cls] = sum(v is Verdict.TP for v in verdicts)
        per_class_ap[cls] = average_precision(verdicts, scores, n_gt, method)

    counted = [per_class_ap[c] for c in classes if num_gt[c] > 0]
    mean_ap = float(np.mean(counted)) if counted else 0.0
    report = EvalReport(
        per_class_ap=per_class_ap,
        mean_ap=mean_ap,
        num_gt=num_gt,
        true_positives=true_positives,
        class_names=dict(class_names or {}),
        size_bin=size_bin,
    )
    if report.is_empty:
        _get_logger().warning("eval_bin_empty", size_bin=size_bin)
    get_metrics_collector().record_eval(
        split="detections", size_bin=size_bin, mean_ap=mean_ap, num_classes=len(counted)
    )
    return report


def predict_dataset(
    model: Model,
    samples: Sequence[SceneSample],
    proposal_settings: ProposalSettings | None = None,
    inference_settings: InferenceSettings | None = None,
) -> dict[str, list[Box]]:
    """Run detection on every sample; detections keyed by sample id."""
    collector = get_metrics_collector()
    out: dict[str, list[Box]] = {}
    for sample in samples:
        with collector.timer("detect"):
            out[sample.sample_id] = detect(
                model, sample.image, proposal_settings, inference_settings
            )
    return out


def segment_dataset_metrics(model: Model, samples: Sequence[SceneSample]) -> SegMetrics | None:
    """Accumulated segmentation metrics over samples with stuff labels."""
    if not model.spec.has_segmentation:
        return None
    k = model.spec.num_seg_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    labelled = [s for s in samples if s.seg_labels is not None]
    if not labelled:
        return None
    for sample in labelled:
        assert sample.seg_labels is not None
        pred = np.argmax(segment(model, sample.image), axis=0)
        confusion += confusion_matrix(pred, sample.seg_labels, k)
    return metrics_from_confusion(confusion)


def ground_truth_of(samples: Iterable[SceneSample]) -> dict[str, list[Box]]:
    return {s.sample_id: list(s.boxes) for s in samples}


# -- detection dumps ---------------------------------------------------------------------


def format_detection_line(image_id: str, box: Box) -> str:
    return (
        f"{image_id} {box.class_id} {_score(box)!r} "
        f"{float(box.x0)!r} {float(box.y0)!r} {float(box.x1)!r} {float(box.y1)!r}"
    )


def write_detections(detections: Mapping[str, Sequence[Box]], path: str | Path) -> Path:
    """Dump detections as ``image_id class score x0 y0 x1 y1`` lines."""
    path = Path(path)
    lines = [
        format_detection_line(image_id, box)
        for image_id in sorted(detections)
        for box in detections[image_id]
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return path


def read_detections(path: str | Path) -> dict[str, list[Box]]:
    """Read a detection dump back into per-image boxes.

    Raises:
        DatasetFormatError: Malformed line (message names the file and line)
    """
    path = Path(path)
    out: dict[str, list[Box]] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise DatasetFormatError(f"{path}:{lineno}: expected 7 fields, got {len(fields)}")
        try:
            class_id = int(fields[1])
            score, x0, y0, x1, y1 = (float(v) for v in fields[2:])
        except ValueError as e:
            raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
        out.setdefault(fields[0], []).append(Box(x0, y0, x1, y1, class_id=class_id, score=score))
    return out


# -- report formatting ---------------------------------------------------------------------


def format_report_table(reports: EvalReport | Sequence[EvalReport]) -> str:
    """One row per report: size bin, per-class AP, mAP (four decimals)."""
    rows_in = [reports] if isinstance(reports, EvalReport) else list(reports)
    if not rows_in:
        return ""
    classes = list(rows_in[0].per_class_ap)
    headers = ["size_bin", *(rows_in[0].name_of(c) for c in classes), "mAP"]
    rows = [
        [r.size_bin, *(f"{r.per_class_ap[c]:.4f}" for c in classes), f"{r.mean_ap:.4f}"]
        for r in rows_in
    ]
    return format_table(headers, rows)


def format_report_kv(report: EvalReport) -> str:
    """Machine-readable ``key=value`` lines."""
    lines = [f"size_bin={report.size_bin}", f"map={report.mean_ap:.6f}"]
    for c, ap in report.per_class_ap.items():
        name = report.name_of(c)
        lines.append(f"ap.{name}={ap:.6f}")
        lines.append(f"num_gt.{name}={report.num_gt[c]}")
    if report.seg is not None:
        lines.append(f"seg.mean_iou={report.seg.mean_iou:.6f}")
        lines.append(f"seg.pixel_accuracy={report.seg.pixel_accuracy:.6f}")
        for k, v in report.seg.per_class_iou.items():
            lines.append(f"seg.iou.{k}={v:.6f}")
    return "\n".join(lines)


def parse_report_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            out[key.strip()] = value.strip()
    return out
