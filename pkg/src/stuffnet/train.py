"""Joint training: loss assembly, SGD, learning-rate schedule, training loops.

``train`` and ``train_constrained`` share one update loop; they differ only in
where the segmentation target of a sampled image comes from (its own stuff
labels, or labels hallucinated by an earlier model).

Design Decision DD-107: One image per iteration, sampled uniformly with
replacement from a seeded stream. Every random draw (image order, RPN and head
sampling) comes from a named stream of ``TrainConfig.seed``, so reruns are
bit-identical.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
import structlog

from stuffnet.boxgeom import POSITIVE, assign_rpn_labels, sample_head_minibatch
from stuffnet.config import ModelSpec, ProposalSettings, TrainConfig
from stuffnet.errors import (
    CapabilityError,
    ConfigError,
    DegenerateBatchError,
    MissingLabelsError,
)
from stuffnet.layers import IGNORE_LABEL, smooth_l1, softmax_cross_entropy
from stuffnet.metrics import get_metrics_collector
from stuffnet.model import Features, Model, forward_heads, forward_rpn, segment
from stuffnet.tensor import (
    ComputeGraph,
    Tensor,
    backward,
    mul,
    reshape,
    rng_for,
    scale,
    stack_sum,
    sub,
    sum_all,
    transpose,
)
from stuffnet.utils import atomic_write_text

if TYPE_CHECKING:
    from stuffnet.data import SceneSample

logger = None

LOSS_TERMS = ("rpn_cls", "rpn_reg", "head_cls", "head_reg", "seg")


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


@dataclass(frozen=True)
class LossWeights:
    rpn_cls: float = 1.0
    rpn_reg: float = 1.0
    head_cls: float = 1.0
    head_reg: float = 1.0
    seg: float = 1.0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> LossWeights:
        return cls(
            rpn_cls=cfg.rpn_cls_weight,
            rpn_reg=cfg.rpn_reg_weight,
            head_cls=cfg.head_cls_weight,
            head_reg=cfg.head_reg_weight,
            seg=cfg.seg_weight,
        )


def _as_scalar(term: Tensor | float) -> Tensor:
    return term if isinstance(term, Tensor) else Tensor(np.array([float(term)]))


def total_loss(
    rpn_cls: Tensor | float,
    rpn_reg: Tensor | float,
    head_cls: Tensor | float,
    head_reg: Tensor | float,
    seg_loss: Tensor | float | None,
    weights: LossWeights | None = None,
) -> Tensor:
    """Weighted sum of the already-normalised loss terms.

    ``seg_loss`` is ``None`` for models without a segmentation stage.

    Raises:
        ValueError: A negative weight

    Example:
        >>> round(total_loss(0.2, 0.1, 0.5, 0.3, 0.4).item(), 12)
        1.5
    """
    weights = weights or LossWeights()
    pairs = [
        (rpn_cls, weights.rpn_cls),
        (rpn_reg, weights.rpn_reg),
        (head_cls, weights.head_cls),
        (head_reg, weights.head_reg),
    ]
    if seg_loss is not None:
        pairs.append((seg_loss, weights.seg))
    for name, (_, w) in zip(LOSS_TERMS, pairs):
        if w < 0:
            raise ValueError(f"loss weight {name} must be >= 0, got {w}")
    return stack_sum([scale(_as_scalar(term), w) for term, w in pairs])


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """Step schedule: ``base_lr`` before ``lr_step``, ``base_lr * lr_factor`` from it on."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return cfg.base_lr * cfg.lr_factor if iteration >= cfg.lr_step else cfg.base_lr


@dataclass
class SGDState:
    """Momentum buffers keyed by parameter name."""

    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: SGDState,
    lr: float,
    momentum: float,
    weight_decay: float,
    lr_multipliers: Mapping[str, float] | None = None,
) -> None:
    """In-place update ``v = momentum v - lr (g + weight_decay w)``, ``w = w + v``.

    Weight decay applies to every tensor, biases included.

    Raises:
        ValueError: A gradient whose shape differs from its parameter
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        step_lr = lr * (lr_multipliers or {}).get(name, 1.0)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v - step_lr * (g + weight_decay * p.data)
        state.velocity[name] = v
        p.data += v


def frozen_multipliers(model: Model, prefixes: Sequence[str]) -> dict[str, float]:
    """Learning-rate multiplier 0 for every parameter under a frozen prefix."""
    return {
        name: 0.0
        for name, _ in model.named_parameters()
        if any(name.startswith(p) for p in prefixes)
    }


@dataclass
class LossRecord:
    """Loss terms of one iteration (1-based)."""

    iteration: int
    rpn_cls: float
    rpn_reg: float
    head_cls: float
    head_reg: float
    seg: float
    total: float

    def to_line(self) -> str:
        return (
            f"iter {self.iteration} rpn_cls {self.rpn_cls:.6f} rpn_reg {self.rpn_reg:.6f} "
            f"head_cls {self.head_cls:.6f} head_reg {self.head_reg:.6f} "
            f"seg {self.seg:.6f} total {self.total:.6f}"
        )

    @classmethod
    def parse_line(cls, line: str) -> LossRecord:
        tokens = line.split()
        if len(tokens) != 14 or tokens[0] != "iter":
            raise ValueError(f"not a loss log line: {line!r}")
        values = dict(zip(tokens[2::2], tokens[3::2]))
        return cls(
            iteration=int(tokens[1]),
            **{name: float(values[name]) for name in (*LOSS_TERMS, "total")},
        )

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in (*LOSS_TERMS, "total")}


@dataclass
class TrainResult:
    model: Model
    log: list[LossRecord]

    @property
    def final_smoothed_loss(self) -> float:
        series = smoothed_losses(self.log)
        return float(series[-1]) if series.size else 0.0


def smoothed_losses(log: Sequence[LossRecord], window: int = 100) -> np.ndarray:
    """Trailing moving average of the total loss."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    totals = np.array([r.total for r in log], dtype=np.float64)
    if totals.size == 0:
        return totals
    csum = np.concatenate([[0.0], np.cumsum(totals)])
    idx = np.arange(1, totals.size + 1)
    lo = np.maximum(0, idx - window)
    return (csum[idx] - csum[lo]) / (idx - lo)


def write_loss_log(log: Sequence[LossRecord], path: str | Path) -> Path:
    path = Path(path)
    atomic_write_text(path, "".join(r.to_line() + "\n" for r in log))
    return path


@dataclass
class HallucinatedLabels:
    """Dense class-index map produced by a trained model."""

    labels: np.ndarray
    source: str = ""

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError(f"label map must be [H,W], got {self.labels.shape}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("hallucinated labels must be non-negative class indices")


def argmax_labels(scores: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of ``[K, H, W]`` scores; ties go to the lower class."""
    return np.asarray(np.argmax(scores, axis=0), dtype=np.int64)


def hallucinate_labels(
    model: Model, images: Sequence[np.ndarray], source: str = ""
) -> list[HallucinatedLabels]:
    """Argmax segmentation of each image by ``model``.

    Raises:
        CapabilityError: The model has no segmentation stage
    """
    if not model.spec.has_segmentation:
        raise CapabilityError(
            f"cannot hallucinate labels with a {model.spec.variant!r} model (no segmentation stage)"
        )
    out = [HallucinatedLabels(argmax_labels(segment(model, img)), source) for img in images]
    _get_logger().info("labels_hallucinated", images=len(out), source=source)
    return out


def pixel_agreement(
    model: Model, images: Sequence[np.ndarray], labels: Sequence[HallucinatedLabels]
) -> float:
    """Fraction of pixels where the model's argmax equals the given labels."""
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} label maps")
    agree = 0
    total = 0
    for img, lab in zip(images, labels):
        pred = argmax_labels(segment(model, img))
        agree += int((pred == lab.labels).sum())
        total += pred.size
    return agree / total if total else 0.0


# -- the shared training loop -----------------------------------------------------


SegTargetFn = Callable[[int, "SceneSample"], "np.ndarray | None"]


def _zero() -> Tensor:
    return Tensor(np.zeros(1))


@dataclass
class LossTerms:
    """Normalised loss terms of one forward pass; ``seg`` is None without a seg stage."""

    rpn_cls: Tensor
    rpn_reg: Tensor
    head_cls: Tensor
    head_reg: Tensor
    seg: Tensor | None

    def values(self) -> dict[str, float]:
        return {
            name: (t.item() if t is not None else 0.0)
            for name, t in ((n, getattr(self, n)) for n in LOSS_TERMS)
        }


def _masked_smooth_l1(pred: Tensor, targets: np.ndarray, mask: np.ndarray, norm: int) -> Tensor:
    diff = mul(sub(pred, Tensor(targets)), Tensor(mask))
    loss = smooth_l1(diff)
    assert isinstance(loss, Tensor)
    return scale(sum_all(loss), 1.0 / max(norm, 1))


def _seg_loss(seg_scores: Tensor, target: np.ndarray) -> Tensor:
    _, k, h, w = seg_scores.shape
    if target.shape != (h, w):
        raise ValueError(f"segmentation target {target.shape} does not match scores {h}x{w}")
    logits = reshape(transpose(seg_scores, (0, 2, 3, 1)), (h * w, k))
    return softmax_cross_entropy(logits, target.reshape(-1))


def compute_losses(
    model: Model,
    sample: SceneSample,
    seg_target: np.ndarray | None,
    cfg: TrainConfig,
    proposal_settings: ProposalSettings,
    iteration: int,
) -> LossTerms:
    """Forward one image and return the five normalised loss terms.

    Detection regression terms are divided by the number of sampled regions
    (anchors or head rois) and the segmentation term is a pixel mean.
    """
    feats: Features = model.features(sample.image)
    image_w, image_h = feats.image_w, feats.image_h
    gts = sample.gt_array()
    classes = sample.gt_classes()

    rpn = forward_rpn(model, sample.image, proposal_settings, features=feats)
    assignment = assign_rpn_labels(
        rpn.anchors,
        gts,
        (image_w, image_h),
        batch=cfg.rpn_batch,
        pos_fraction=cfg.rpn_pos_fraction,
        hi=cfg.rpn_pos_iou,
        lo=cfg.rpn_neg_iou,
        seed=rng_for(cfg.seed, "rpn_sampling", iteration),
    )
    rpn_cls = softmax_cross_entropy(rpn.scores, assignment.labels)
    pos_mask = np.repeat((assignment.labels == POSITIVE)[:, None], 4, axis=1).astype(np.float64)
    rpn_reg = _masked_smooth_l1(rpn.deltas, assignment.targets, pos_mask, assignment.num_sampled)

    head_cls: Tensor = _zero()
    head_reg: Tensor = _zero()
    seg_scores: Tensor | None = None
    try:
        batch = sample_head_minibatch(
            rpn.proposals,
            gts,
            classes,
            batch=cfg.head_batch,
            fg_fraction=cfg.head_fg_fraction,
            fg_thresh=cfg.head_fg_iou,
            bg_range=(cfg.head_bg_iou_lo, cfg.head_bg_iou_hi),
            seed=rng_for(cfg.seed, "head_sampling", iteration),
            include_gt=cfg.include_gt_rois,
        )
    except DegenerateBatchError as e:
        _get_logger().debug("head_batch_skipped", iteration=iteration, reason=str(e))
    else:
        out = forward_heads(model, sample.image, batch.rois, features=feats)
        seg_scores = out.seg_scores
        num_classes = model.spec.num_classes
        r = len(batch)
        targets = np.zeros((r, 4 * num_classes))
        mask = np.zeros((r, 4 * num_classes))
        for row in np.flatnonzero(batch.labels > 0):
            c = int(batch.labels[row])
            targets[row, 4 * c : 4 * c + 4] = batch.targets[row]
            mask[row, 4 * c : 4 * c + 4] = 1.0
        head_cls = softmax_cross_entropy(out.cls_scores, batch.labels)
        head_reg = _masked_smooth_l1(out.bbox_deltas, targets, mask, r)

    seg: Tensor | None = None
    if model.spec.has_segmentation:
        if seg_target is None:
            raise MissingLabelsError(f"sample {sample.sample_id} has no segmentation target")
        if seg_scores is None:
            seg_scores = model.segment_scores(feats)
        seg = _seg_loss(seg_scores, seg_target)
    return LossTerms(rpn_cls, rpn_reg, head_cls, head_reg, seg)


def _run_training(
    model: Model,
    dataset: Sequence[SceneSample],
    cfg: TrainConfig,
    seg_target_for: SegTargetFn,
    proposal_settings: ProposalSettings | None,
    mode: str,
) -> TrainResult:
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    proposal_settings = proposal_settings or ProposalSettings()
    trained = model.clone()
    weights = LossWeights.from_config(cfg)
    multipliers = frozen_multipliers(trained, cfg.frozen_prefixes)
    state = SGDState()
    collector = get_metrics_collector()
    order = rng_for(cfg.seed, "image_order").integers(0, len(dataset), size=cfg.iterations)
    log: list[LossRecord] = []
    params = trained.params

    _get_logger().info(
        "training_started",
        mode=mode,
        variant=trained.spec.variant,
        iterations=cfg.iterations,
        images=len(dataset),
        frozen=len(multipliers),
    )
    for iteration in range(cfg.iterations):
        start = time.perf_counter()
        index = int(order[iteration])
        sample = dataset[index]
        seg_target = seg_target_for(index, sample) if trained.spec.has_segmentation else None
        with ComputeGraph() as graph:
            terms = compute_losses(trained, sample, seg_target, cfg, proposal_settings, iteration)
            loss = total_loss(
                terms.rpn_cls, terms.rpn_reg, terms.head_cls, terms.head_reg, terms.seg, weights
            )
        grads = backward(graph, loss, list(params.values()))
        lr = lr_at(cfg, iteration)
        sgd_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay, multipliers)

        values = terms.values()
        record = LossRecord(iteration=iteration + 1, total=loss.item(), **values)
        log.append(record)
        duration_ms = (time.perf_counter() - start) * 1000
        collector.record_iteration(record.iteration, record.as_dict(), lr, duration_ms)
        if record.iteration % cfg.log_every == 0 or record.iteration == cfg.iterations:
            _get_logger().info(
                "train_iteration",
                iteration=record.iteration,
                total=round(record.total, 6),
                lr=lr,
                smoothed=round(float(smoothed_losses(log)[-1]), 6),
            )

    trained.quantize_()
    _get_logger().info("training_finished", mode=mode, iterations=cfg.iterations)
    return TrainResult(model=trained, log=log)


def check_class_counts(
    spec: ModelSpec, dataset: Sequence[SceneSample], seg_labels: bool = True
) -> None:
    """Reject a model whose class counts cannot represent the dataset's labels.

    Checks the vocabularies a :class:`SceneDataset` carries, then the box and
    (with ``seg_labels``) stuff label values themselves. The segmentation
    vocabulary only counts when some sample carries stuff labels.

    Raises:
        ConfigError: ``model.num_classes`` or ``model.num_seg_classes`` too small
            or different from the dataset's vocabulary
    """
    names = tuple(getattr(dataset, "object_names", ()))
    if names and spec.num_classes != len(names) + 1:
        raise ConfigError(
            f"model.num_classes is {spec.num_classes} but the dataset has {len(names)} "
            f"object classes plus background; set model.num_classes={len(names) + 1}"
        )
    check_seg = (
        seg_labels
        and spec.has_segmentation
        and any(s.seg_labels is not None for s in dataset)
    )
    vocab = getattr(dataset, "vocab", None)
    if check_seg and vocab is not None and spec.num_seg_classes != len(vocab):
        raise ConfigError(
            f"model.num_seg_classes is {spec.num_seg_classes} but the dataset vocabulary "
            f"has {len(vocab)} classes; set model.num_seg_classes={len(vocab)}"
        )
    for sample in dataset:
        for box in sample.boxes:
            if box.class_id is not None and not 0 < box.class_id < spec.num_classes:
                raise ConfigError(
                    f"sample {sample.sample_id}: box class {box.class_id} outside "
                    f"[1, {spec.num_classes}) of model.num_classes"
                )
        if check_seg and sample.seg_labels is not None:
            labels = sample.seg_labels[sample.seg_labels != IGNORE_LABEL]
            if labels.size and int(labels.max()) >= spec.num_seg_classes:
                raise ConfigError(
                    f"sample {sample.sample_id}: stuff label {int(labels.max())} outside "
                    f"[0, {spec.num_seg_classes}) of model.num_seg_classes"
                )


def train(
    model: Model,
    dataset: Sequence[SceneSample],
    cfg: TrainConfig,
    proposal_settings: ProposalSettings | None = None,
) -> TrainResult:
    """Jointly train detection (and segmentation, when present) on labelled data.

    Returns a trained copy; ``model`` itself is left untouched.

    Raises:
        ValueError: Empty dataset
        ConfigError: Class counts do not fit the dataset (see :func:`check_class_counts`)
        MissingLabelsError: A model with a segmentation stage and a sample
            without stuff labels
    """
    check_class_counts(model.spec, dataset)
    if model.spec.has_segmentation:
        unlabelled = [s.sample_id for s in dataset if s.seg_labels is None]
        if unlabelled:
            raise MissingLabelsError(
                f"variant {model.spec.variant!r} needs segmentation labels; "
                f"{len(unlabelled)} samples have none (first: {unlabelled[0]})"
            )

    def own_labels(_: int, sample: SceneSample) -> np.ndarray | None:
        return sample.seg_labels

    return _run_training(model, dataset, cfg, own_labels, proposal_settings, "joint")


def train_constrained(
    model_init: Model,
    dataset: Sequence[SceneSample],
    labels: Sequence[HallucinatedLabels] | Mapping[int, HallucinatedLabels],
    cfg: TrainConfig,
    proposal_settings: ProposalSettings | None = None,
) -> TrainResult:
    """Train with hallucinated maps as the segmentation target (feature constraining).

    Args:
        model_init: Starting model; needs a segmentation stage
        dataset: Samples without (or ignoring) stuff labels
        labels: One map per sample, by position or by dataset index
        cfg: Training configuration

    Raises:
        CapabilityError: ``model_init`` has no segmentation stage
        ConfigError: ``model.num_classes`` does not fit the dataset's boxes
        MissingLabelsError: Some sample has no hallucinated map
    """
    if not model_init.spec.has_segmentation:
        raise CapabilityError(
            f"feature constraining needs a segmentation stage; got {model_init.spec.variant!r}"
        )
    check_class_counts(model_init.spec, dataset, seg_labels=False)
    by_index = dict(labels) if isinstance(labels, Mapping) else dict(enumerate(labels))
    missing = [i for i in range(len(dataset)) if i not in by_index]
    if missing:
        raise MissingLabelsError(
            f"{len(missing)} samples have no hallucinated labels (first index {missing[0]})"
        )

    def hallucinated(index: int, _: SceneSample) -> np.ndarray | None:
        return by_index[index].labels

    return _run_training(model_init, dataset, cfg, hallucinated, proposal_settings, "constrained")
