"""Box arithmetic and the proposal/minibatch sampling machinery.

Boxes are continuous half-open rectangles ``(x0, y0, x1, y1)`` in pixels with
``width = x1 - x0`` (no +1 correction). Array forms are ``[N, 4]`` float64.

Design Decision DD-105: Regression targets use the centre/log-size
parameterisation. Decoding clamps the log-size deltas at ``ln(1000 / 16)`` so an
untrained regressor can never overflow ``exp``.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import structlog

from stuffnet.errors import DegenerateBatchError
from stuffnet.tensor import rng_for

logger = None

BBOX_LOG_CLIP = math.log(1000.0 / 16.0)

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


def _get_logger() -> structlog.BoundLogger:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


@dataclass(frozen=True)
class Box:
    """Axis-aligned box with optional detection metadata.

    Example:
        >>> Box(0, 0, 10, 10).area
        100.0
    """

    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int | None = None
    score: float | None = None
    ignore: bool = False

    @property
    def width(self) -> float:
        return float(self.x1 - self.x0)

    @property
    def height(self) -> float:
        return float(self.y1 - self.y0)

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_valid(self) -> bool:
        return self.x1 > self.x0 and self.y1 > self.y0

    def coords(self) -> tuple[float, float, float, float]:
        return (float(self.x0), float(self.y0), float(self.x1), float(self.y1))

    def with_ignore(self, ignore: bool = True) -> Box:
        return replace(self, ignore=ignore)

    @classmethod
    def from_array(
        cls,
        row: Sequence[float] | np.ndarray,
        class_id: int | None = None,
        score: float | None = None,
    ) -> Box:
        x0, y0, x1, y1 = (float(v) for v in row)
        return cls(x0, y0, x1, y1, class_id=class_id, score=score)


@dataclass(frozen=True)
class RegressionTarget:
    tx: float
    ty: float
    tw: float
    th: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack box coordinates into ``[N, 4]``."""
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.coords() for b in boxes], dtype=np.float64)


def _require_valid(box: Box, what: str) -> None:
    if not box.is_valid:
        raise ValueError(f"{what} {box.coords()} is degenerate (needs x1 > x0 and y1 > y0)")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes.

    Raises:
        ValueError: Either box has non-positive width or height

    Example:
        >>> round(iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)), 6)
        0.142857
    """
    _require_valid(a, "box")
    _require_valid(b, "box")
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU ``[N, M]`` between two box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass(frozen=True)
class AnchorGrid:
    """Anchor layout of one feature map.

    A scale ``s`` and ratio ``r`` (height over width) give ``w = s / sqrt(r)``
    and ``h = s * sqrt(r)``, so every anchor of scale ``s`` has area ``s**2``.
    """

    stride: float
    scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self) -> None:
        if self.stride <= 0:
            raise ValueError(f"stride must be > 0, got {self.stride}")
        if self.k < 1:
            raise ValueError("anchor grid needs at least one scale and one ratio")

    @property
    def k(self) -> int:
        return len(self.scales) * len(self.ratios)

    def base_sizes(self) -> np.ndarray:
        """``[k, 2]`` (w, h) per anchor, scale-major over ratios."""
        sizes = [(s / math.sqrt(r), s * math.sqrt(r)) for s in self.scales for r in self.ratios]
        return np.array(sizes, dtype=np.float64)


def generate_anchors(grid: AnchorGrid, feat_h: int, feat_w: int) -> np.ndarray:
    """All anchors of a ``feat_h x feat_w`` map as ``[feat_h * feat_w * k, 4]``.

    Rows are ordered by cell (row-major), then scale, then ratio.

    Example:
        >>> generate_anchors(AnchorGrid(8, (8.0,), (1.0,)), 1, 1).tolist()
        [[0.0, 0.0, 8.0, 8.0]]
    """
    sizes = grid.base_sizes()
    cy = (np.arange(feat_h) + 0.5) * grid.stride
    cx = (np.arange(feat_w) + 0.5) * grid.stride
    centers = np.stack(np.meshgrid(cx, cy, indexing="xy"), axis=-1).reshape(-1, 1, 2)
    half = sizes[None, :, :] / 2.0
    anchors = np.concatenate([centers - half, centers + half], axis=-1)
    return anchors.reshape(-1, 4)


def _centre_size(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Regression targets ``[N, 4]`` taking each anchor to its paired box.

    Raises:
        ValueError: Any box with non-positive width or height
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centre_size(anchors)
    gcx, gcy, gw, gh = _centre_size(gts)
    if (aw <= 0).any() or (ah <= 0).any() or (gw <= 0).any() or (gh <= 0).any():
        raise ValueError("encode needs boxes with positive width and height")
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Apply ``[N, 4]`` deltas to anchors; inverse of :func:`encode_boxes`."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centre_size(anchors)
    if (aw <= 0).any() or (ah <= 0).any():
        raise ValueError("decode needs anchors with positive width and height")
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = aw * np.exp(np.minimum(deltas[:, 2], BBOX_LOG_CLIP))
    h = ah * np.exp(np.minimum(deltas[:, 3], BBOX_LOG_CLIP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode(anchor: Box, gt: Box) -> RegressionTarget:
    """Centre/log-size offsets from ``anchor`` to ``gt``.

    Example:
        >>> t = encode(Box(0, 0, 10, 10), Box(2, 2, 14, 14))
        >>> round(t.tx, 12), round(t.tw, 12)
        (0.3, 0.182321556794)
    """
    _require_valid(anchor, "anchor")
    _require_valid(gt, "box")
    row = encode_boxes(boxes_to_array([anchor]), boxes_to_array([gt]))[0]
    return RegressionTarget(*(float(v) for v in row))


def decode(anchor: Box, t: RegressionTarget) -> Box:
    _require_valid(anchor, "anchor")
    row = decode_boxes(boxes_to_array([anchor]), np.array([t.as_tuple()]))[0]
    return Box.from_array(row)


def nms(
    boxes: np.ndarray | Sequence[Box],
    scores: np.ndarray | Sequence[float] | None = None,
    iou_threshold: float = 0.7,
    max_keep: int | None = None,
) -> np.ndarray:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and suppresses every box
    overlapping it with IoU above ``iou_threshold``. Equal scores keep the
    lower index first.

    Args:
        boxes: ``[N, 4]`` array, or a sequence of scored :class:`Box`
        scores: ``[N]`` scores (taken from the boxes when omitted)
        iou_threshold: Suppression threshold
        max_keep: Stop after this many boxes

    Returns:
        Kept indices in descending score order
    """
    if len(boxes) and isinstance(boxes[0], Box):
        box_list = [b for b in boxes if isinstance(b, Box)]
        arr = boxes_to_array(box_list)
        if scores is None:
            if any(b.score is None for b in box_list):
                raise ValueError("nms without explicit scores needs scored boxes")
            scores = [float(b.score or 0.0) for b in box_list]
    else:
        arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if scores is None:
            scores = np.zeros(arr.shape[0]) if arr.shape[0] == 0 else None
        if scores is None:
            raise ValueError("nms on a box array needs scores")
    score_arr = np.asarray(scores, dtype=np.float64).reshape(-1)
    if score_arr.shape[0] != arr.shape[0]:
        raise ValueError(f"{score_arr.shape[0]} scores for {arr.shape[0]} boxes")

    order = np.argsort(-score_arr, kind="stable")
    suppressed = np.zeros(arr.shape[0], dtype=bool)
    keep: list[int] = []
    for idx in order:
        if max_keep is not None and len(keep) >= max_keep:
            break
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= iou_matrix(arr[idx : idx + 1], arr)[0] > iou_threshold
    return np.array(keep, dtype=np.int64)


def clip_and_filter_proposals(
    boxes: np.ndarray,
    image_w: float,
    image_h: float,
    min_size: float,
    return_index: bool = False,
) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Clamp boxes to the image and drop those narrower or shorter than ``min_size``.

    Example:
        >>> clip_and_filter_proposals(np.array([[-5.0, -5.0, 3.0, 3.0]]), 10, 10, 1.0).tolist()
        [[0.0, 0.0, 3.0, 3.0]]
    """
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    clipped = np.empty_like(arr)
    clipped[:, [0, 2]] = np.clip(arr[:, [0, 2]], 0.0, image_w)
    clipped[:, [1, 3]] = np.clip(arr[:, [1, 3]], 0.0, image_h)
    w = clipped[:, 2] - clipped[:, 0]
    h = clipped[:, 3] - clipped[:, 1]
    keep = np.flatnonzero((w >= min_size) & (h >= min_size) & (w > 0) & (h > 0))
    if return_index:
        return clipped[keep], keep
    return clipped[keep]


def generate_proposals(
    anchors: np.ndarray,
    objectness: np.ndarray,
    deltas: np.ndarray,
    image_w: float,
    image_h: float,
    *,
    nms_iou: float = 0.7,
    pre_nms_top: int = 2000,
    post_nms_top: int = 300,
    min_size: float = 2.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, filter, rank and suppress RPN outputs.

    Args:
        anchors: ``[A, 4]``
        objectness: ``[A]`` foreground probabilities
        deltas: ``[A, 4]`` regression outputs

    Returns:
        ``(boxes [P, 4], scores [P])`` in descending score order
    """
    decoded = decode_boxes(anchors, deltas)
    boxes, keep = clip_and_filter_proposals(decoded, image_w, image_h, min_size, return_index=True)
    scores = np.asarray(objectness, dtype=np.float64).reshape(-1)[keep]
    order = np.argsort(-scores, kind="stable")[:pre_nms_top]
    boxes, scores = boxes[order], scores[order]
    kept = nms(boxes, scores, nms_iou, post_nms_top)
    return boxes[kept], scores[kept]


# -- RPN label assignment ----------------------------------------------------------


@dataclass
class RPNAssignment:
    """Per-anchor labels (1 positive, 0 negative, -1 ignore) and targets."""

    labels: np.ndarray
    targets: np.ndarray
    matched_gt: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())

    @property
    def num_negative(self) -> int:
        return int((self.labels == NEGATIVE).sum())

    @property
    def num_sampled(self) -> int:
        return self.num_positive + self.num_negative


def _as_rng(seed: int | np.random.Generator, *stream: str | int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_for(int(seed), *stream)


def label_anchors(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    image_w: float,
    image_h: float,
    hi: float = 0.7,
    lo: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw RPN labels before subsampling.

    Anchors crossing the image are ignored. An in-bounds anchor is negative when
    its best IoU is below ``lo`` and positive when it is above ``hi`` or it is
    (one of) the best anchors of some ground-truth box with nonzero overlap.

    Returns:
        ``(labels [A], matched_gt [A])``
    """
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"thresholds must satisfy 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(anchors.shape[0], IGNORE, dtype=np.int64)
    matched = np.zeros(anchors.shape[0], dtype=np.int64)
    inside = np.flatnonzero(
        (anchors[:, 0] >= 0)
        & (anchors[:, 1] >= 0)
        & (anchors[:, 2] <= image_w)
        & (anchors[:, 3] <= image_h)
    )
    if inside.size == 0:
        return labels, matched
    if gts.shape[0] == 0:
        labels[inside] = NEGATIVE
        return labels, matched

    ious = iou_matrix(anchors[inside], gts)
    argmax = ious.argmax(axis=1)
    max_iou = ious[np.arange(inside.size), argmax]
    matched[inside] = argmax

    sub = labels[inside]
    sub[max_iou < lo] = NEGATIVE
    gt_max = ious.max(axis=0)
    best_rows = np.nonzero((ious == gt_max[None, :]) & (gt_max[None, :] > 0))[0]
    sub[best_rows] = POSITIVE
    sub[max_iou > hi] = POSITIVE
    labels[inside] = sub
    return labels, matched


def subsample_labels(
    labels: np.ndarray,
    batch: int = 256,
    pos_fraction: float = 0.5,
    seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """Cap positives at ``pos_fraction * batch`` and fill the batch with negatives."""
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    rng = _as_rng(seed, "rpn_sampling")
    out = labels.copy()
    pos = np.flatnonzero(out == POSITIVE)
    max_pos = int(pos_fraction * batch)
    if pos.size > max_pos:
        out[rng.choice(pos, size=pos.size - max_pos, replace=False)] = IGNORE
    max_neg = batch - int((out == POSITIVE).sum())
    neg = np.flatnonzero(out == NEGATIVE)
    if neg.size > max_neg:
        out[rng.choice(neg, size=neg.size - max_neg, replace=False)] = IGNORE
    return out


def assign_rpn_labels(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    image_bounds: tuple[float, float],
    batch: int = 256,
    pos_fraction: float = 0.5,
    hi: float = 0.7,
    lo: float = 0.3,
    seed: int | np.random.Generator = 0,
) -> RPNAssignment:
    """Label anchors for one image and sample the RPN minibatch.

    Args:
        anchors: ``[A, 4]`` anchors in image pixels
        gt_boxes: ``[G, 4]`` ground-truth boxes (may be empty)
        image_bounds: ``(width, height)``
        batch: Sampled anchors per image
        pos_fraction: Maximum positive share of the batch
        hi: IoU above which an anchor is positive
        lo: IoU below which an anchor is negative
        seed: Seed or generator for the subsampling

    Returns:
        Labels, per-positive regression targets and matched ground-truth index
    """
    image_w, image_h = image_bounds
    raw, matched = label_anchors(anchors, gt_boxes, image_w, image_h, hi, lo)
    labels = subsample_labels(raw, batch, pos_fraction, seed)
    targets = np.zeros((labels.shape[0], 4))
    pos = np.flatnonzero(labels == POSITIVE)
    if pos.size:
        gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        targets[pos] = encode_boxes(np.asarray(anchors)[pos], gts[matched[pos]])
    _get_logger().debug(
        "rpn_labels_assigned",
        positives=int(pos.size),
        negatives=int((labels == NEGATIVE).sum()),
        anchors=int(labels.shape[0]),
    )
    return RPNAssignment(labels=labels, targets=targets, matched_gt=matched)


# -- detection-head minibatch ----------------------------------------------------------


@dataclass
class HeadMinibatch:
    """Sampled regions for the detection head (foreground first)."""

    rois: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    matched_gt: np.ndarray
    source_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_foreground(self) -> int:
        return int((self.labels > 0).sum())

    def __len__(self) -> int:
        return int(self.rois.shape[0])


def sample_head_minibatch(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray | Sequence[int],
    batch: int = 128,
    fg_fraction: float = 0.25,
    fg_thresh: float = 0.5,
    bg_range: tuple[float, float] = (0.1, 0.5),
    seed: int | np.random.Generator = 0,
    include_gt: bool = False,
) -> HeadMinibatch:
    """Sample foreground and background regions for the classification head.

    Foreground regions overlap some ground-truth box with IoU >= ``fg_thresh``
    and take its class; background regions have best IoU in ``bg_range`` and
    class 0. At most ``fg_fraction * batch`` foreground regions are kept and the
    rest of the batch is filled with background.

    Args:
        proposals: ``[P, 4]`` candidate regions
        gt_boxes: ``[G, 4]`` ground-truth boxes
        gt_classes: ``[G]`` class ids (1-based; 0 is background)
        include_gt: Append the ground-truth boxes to the candidates

    Raises:
        ValueError: Thresholds out of order
        DegenerateBatchError: Neither pool has a candidate
    """
    bg_lo, bg_hi = bg_range
    if not (0.0 <= bg_lo <= bg_hi <= 1.0 and 0.0 <= fg_thresh <= 1.0):
        raise ValueError(f"thresholds out of order: fg={fg_thresh}, bg={bg_range}")
    rng = _as_rng(seed, "head_sampling")
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    pool = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if include_gt and gts.shape[0]:
        pool = np.concatenate([pool, gts], axis=0)

    if gts.shape[0] and pool.shape[0]:
        ious = iou_matrix(pool, gts)
        argmax = ious.argmax(axis=1)
        max_iou = ious[np.arange(pool.shape[0]), argmax]
    else:
        argmax = np.zeros(pool.shape[0], dtype=np.int64)
        max_iou = np.zeros(pool.shape[0])

    fg = np.flatnonzero(max_iou >= fg_thresh)
    bg = np.flatnonzero((max_iou >= bg_lo) & (max_iou < bg_hi))
    if fg.size + bg.size == 0:
        raise DegenerateBatchError(
            f"no foreground or background candidates among {pool.shape[0]} regions"
        )

    n_fg = min(int(round(fg_fraction * batch)), fg.size)
    if fg.size > n_fg:
        fg = np.sort(rng.choice(fg, size=n_fg, replace=False))
    n_bg = min(batch - n_fg, bg.size)
    if bg.size > n_bg:
        bg = np.sort(rng.choice(bg, size=n_bg, replace=False))

    keep = np.concatenate([fg, bg]).astype(np.int64)
    labels = np.zeros(keep.size, dtype=np.int64)
    labels[: fg.size] = classes[argmax[fg]]
    targets = np.zeros((keep.size, 4))
    if fg.size:
        targets[: fg.size] = encode_boxes(pool[fg], gts[argmax[fg]])
    return HeadMinibatch(
        rois=pool[keep],
        labels=labels,
        targets=targets,
        matched_gt=argmax[keep],
        source_index=keep,
    )
