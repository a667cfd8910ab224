"""Network assembly: trunk, detection branch, segmentation branch, checkpoints.

Layout for ``trunk_channels = [c1, ..., cL]``::

    image -> stage 1 .. stage L-1 (shared; 2x2/2 pool after each but the last)
          -> pool 2x2 stride 2 -> stage L           (detection features)
          -> pool 3x3 stride 1 -> stage L, dilated  (segmentation features)

The detection features feed the RPN and RoI pooling. The segmentation features
feed a dilated classifier whose scores are bilinearly upsampled to the input
size. In the ``fused`` variant each region is pooled from both maps (the
segmentation map with coordinates doubled) and the results are summed.

Design Decision DD-106: All weights are Xavier-initialised with zero biases and
rounded to float32 so a freshly built model survives a checkpoint round trip
bit-for-bit.
"""

from __future__ import annotations

import hashlib
import struct
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import structlog

from stuffnet.boxgeom import (
    AnchorGrid,
    Box,
    clip_and_filter_proposals,
    decode_boxes,
    generate_anchors,
    generate_proposals,
    nms,
)
from stuffnet.config import InferenceSettings, ModelSpec, ProposalSettings
from stuffnet.errors import CapabilityError, CheckpointError, InvalidProposalError, ShapeError
from stuffnet.layers import (
    ConvParams,
    PoolParams,
    bilinear_upsample,
    conv2d,
    fully_connected,
    maxpool2d,
    relu,
    roi_maxpool,
    roi_maxpool_many,
    softmax,
)
from stuffnet.metrics import get_metrics_collector
from stuffnet.tensor import Tensor, add, reshape, transpose, xavier_init
from stuffnet.utils import atomic_write_bytes

logger = None

CHECKPOINT_MAGIC = b"SNCK"
CHECKPOINT_VERSION = 1
MAX_TENSOR_RANK = 4

_POOL2 = PoolParams(window=2, stride=2)
_POOL_SEG = PoolParams.size_preserving(3)


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Name and shape of every weight of ``spec``, in construction order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name: str, out_ch: int, in_ch: int, k: int) -> None:
        shapes[f"{name}.weight"] = (out_ch, in_ch, k, k)
        shapes[f"{name}.bias"] = (out_ch,)

    def fc(name: str, d_in: int, d_out: int) -> None:
        shapes[f"{name}.weight"] = (d_in, d_out)
        shapes[f"{name}.bias"] = (d_out,)

    channels = spec.trunk_channels
    last = len(channels)
    in_ch = 3
    for stage in range(1, last):
        width = channels[stage - 1]
        conv(f"conv{stage}_1", width, in_ch, 3)
        conv(f"conv{stage}_2", width, width, 3)
        in_ch = width
    c_last = channels[-1]
    conv(f"conv{last}_1", c_last, in_ch, 3)
    conv(f"conv{last}_2", c_last, c_last, 3)
    if spec.has_segmentation:
        conv(f"conv{last}_1_seg", c_last, in_ch, 3)
        conv(f"conv{last}_2_seg", c_last, c_last, 3)

    k = spec.anchors_per_cell
    conv("rpn_conv", spec.rpn_hidden, c_last, 3)
    conv("rpn_cls_score", 2 * k, spec.rpn_hidden, 1)
    conv("rpn_bbox_pred", 4 * k, spec.rpn_hidden, 1)

    fc("fc6", c_last * spec.roi_grid * spec.roi_grid, spec.fc_width)
    fc("fc7", spec.fc_width, spec.fc_width)
    fc("cls_score", spec.fc_width, spec.num_classes)
    fc("bbox_pred", spec.fc_width, 4 * spec.num_classes)

    if spec.has_segmentation:
        conv("fc6_seg", spec.seg_hidden, c_last, 3)
        conv("fc7_seg", spec.seg_hidden, spec.seg_hidden, 1)
        conv("fc8_seg", spec.num_seg_classes, spec.seg_hidden, 1)
    return shapes


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    return shape[0], shape[1]


@dataclass
class Features:
    """Branch feature maps of one image."""

    det: Tensor
    seg: Tensor | None
    image_h: int
    image_w: int


@dataclass
class RPNOutput:
    """Per-anchor RPN outputs and the proposals derived from them."""

    scores: Tensor  # [A, 2] objectness logits
    deltas: Tensor  # [A, 4]
    anchors: np.ndarray
    proposals: np.ndarray
    proposal_scores: np.ndarray
    features: Features


@dataclass
class DetectionOutput:
    """Head outputs for a set of regions."""

    cls_scores: Tensor  # [R, C] logits
    bbox_deltas: Tensor  # [R, 4C]
    rois: np.ndarray
    seg_scores: Tensor | None  # [1, K, H, W]

    def class_probabilities(self) -> np.ndarray:
        return softmax(self.cls_scores.data, axis=1)


class Model:
    """A built network: spec plus named weight tensors.

    Forward passes never mutate weights; training updates them in place.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        expected = parameter_shapes(spec)
        if list(params) != list(expected):
            raise ShapeError("parameter names do not match the model spec")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")
        self.spec = spec
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: object) -> bool:
        return name in self.params

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def clone(self) -> Model:
        copied = {
            name: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=name)
            for name, p in self.params.items()
        }
        return Model(self.spec.model_copy(deep=True), copied)

    def quantize_(self) -> Model:
        """Round every weight to the nearest float32 value, in place."""
        for p in self.params.values():
            p.data[...] = p.data.astype(np.float32).astype(np.float64)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise CheckpointError(f"state is missing tensor {name}")
            if state[name].shape != p.shape:
                raise CheckpointError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data[...] = state[name]

    # -- forward pieces --------------------------------------------------------

    def _conv(self, x: Tensor, name: str, pad: int = 1, dilation: int = 1) -> Tensor:
        p = ConvParams(
            self.params[f"{name}.weight"], self.params[f"{name}.bias"], pad=pad, dilation=dilation
        )
        return conv2d(x, p)

    def _fc(self, x: Tensor, name: str) -> Tensor:
        return fully_connected(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def features(self, image: Tensor | np.ndarray) -> Features:
        """Run the trunk and both branch stages.

        Raises:
            ShapeError: Image sides not divisible by ``det_subsample``
        """
        x = _as_batch(image)
        _, _, h, w = x.shape
        s = self.spec.det_subsample
        if h % s or w % s:
            raise ShapeError(f"image size {h}x{w} is not divisible by det_subsample {s}")

        last = len(self.spec.trunk_channels)
        for stage in range(1, last):
            x = relu(self._conv(x, f"conv{stage}_1"))
            x = relu(self._conv(x, f"conv{stage}_2"))
            if stage < last - 1:
                x = maxpool2d(x, _POOL2)
        shared = x

        det = maxpool2d(shared, _POOL2)
        det = relu(self._conv(det, f"conv{last}_1"))
        det = relu(self._conv(det, f"conv{last}_2"))

        seg = None
        if self.spec.has_segmentation:
            d = self.spec.seg_dilation
            seg = maxpool2d(shared, _POOL_SEG)
            seg = relu(self._conv(seg, f"conv{last}_1_seg", pad=d, dilation=d))
            seg = relu(self._conv(seg, f"conv{last}_2_seg", pad=d, dilation=d))
        return Features(det=det, seg=seg, image_h=h, image_w=w)

    def rpn(self, det: Tensor) -> tuple[Tensor, Tensor]:
        """Objectness logits ``[H'W'k, 2]`` and deltas ``[H'W'k, 4]``."""
        hidden = relu(self._conv(det, "rpn_conv"))
        cls = self._conv(hidden, "rpn_cls_score", pad=0)
        bbox = self._conv(hidden, "rpn_bbox_pred", pad=0)
        k = self.spec.anchors_per_cell
        _, _, fh, fw = det.shape
        cls = reshape(transpose(cls, (0, 2, 3, 1)), (fh * fw * k, 2))
        bbox = reshape(transpose(bbox, (0, 2, 3, 1)), (fh * fw * k, 4))
        return cls, bbox

    def pool_regions(self, feats: Features, rois: np.ndarray) -> Tensor:
        """RoI features ``[R, C, G, G]`` for image-space regions."""
        rois_feat = np.asarray(rois, dtype=np.float64).reshape(-1, 4) / self.spec.det_subsample
        grid = self.spec.roi_grid
        pooled = roi_maxpool_many(feats.det, rois_feat, grid)
        if self.spec.variant == "fused":
            assert feats.seg is not None
            _check_resolution(feats.det, feats.seg)
            pooled = add(pooled, roi_maxpool_many(feats.seg, rois_feat * 2.0, grid))
        return pooled

    def heads(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        r = pooled.shape[0]
        x = reshape(pooled, (r, pooled.size // r))
        x = relu(self._fc(x, "fc6"))
        x = relu(self._fc(x, "fc7"))
        return self._fc(x, "cls_score"), self._fc(x, "bbox_pred")

    def segment_scores(self, feats: Features) -> Tensor:
        """Upsampled segmentation scores ``[1, K, H, W]``."""
        if feats.seg is None:
            raise CapabilityError(f"variant {self.spec.variant!r} has no segmentation stage")
        d = self.spec.seg_dilation
        x = relu(self._conv(feats.seg, "fc6_seg", pad=d, dilation=d))
        x = relu(self._conv(x, "fc7_seg", pad=0))
        x = self._conv(x, "fc8_seg", pad=0)
        return bilinear_upsample(x, self.spec.seg_subsample, self.spec.max_upsample_size)


def _as_batch(image: Tensor | np.ndarray) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
    if t.ndim == 3:
        t = Tensor(t.data[None], requires_grad=t.requires_grad, name=t.name)
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 3:
        raise ShapeError(f"image must be [3,H,W] or [1,3,H,W], got {t.shape}")
    return t


def _check_resolution(det_feat: Tensor, seg_feat: Tensor) -> None:
    dh, dw = det_feat.shape[2:]
    sh, sw = seg_feat.shape[2:]
    if (sh, sw) != (2 * dh, 2 * dw):
        raise ShapeError(
            f"segmentation map {sh}x{sw} must be exactly twice the detection map {dh}x{dw}"
        )
    if det_feat.shape[1] != seg_feat.shape[1]:
        raise ShapeError(
            f"branch channel counts differ: {det_feat.shape[1]} vs {seg_feat.shape[1]}"
        )


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Build and initialise a model.

    Args:
        spec: Validated model spec
        seed: Master seed; each tensor draws from its own named stream

    Returns:
        Model with Xavier weights and zero biases

    Example:
        >>> model = build(ModelSpec(variant="baseline"), seed=0)
        >>> "conv4_1_seg.weight" in model
        False
    """
    params: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True, name=name)
            continue
        fan_in, fan_out = _fans(shape)
        params[name] = xavier_init(fan_in, fan_out, shape, seed, stream=name, name=name)
    model = Model(spec, params).quantize_()
    _get_logger().info(
        "model_built",
        variant=spec.variant,
        parameters=model.parameter_count(),
        tensors=len(params),
        seed=seed,
    )
    return model


def forward_rpn(
    model: Model,
    image: Tensor | np.ndarray,
    settings: ProposalSettings | None = None,
    features: Features | None = None,
) -> RPNOutput:
    """Score every anchor and turn the scores into proposals.

    Raises:
        ShapeError: Image sides not divisible by ``det_subsample``
    """
    settings = settings or ProposalSettings()
    feats = features or model.features(image)
    scores, deltas = model.rpn(feats.det)
    _, _, fh, fw = feats.det.shape
    spec = model.spec
    grid = AnchorGrid(
        stride=float(spec.det_subsample),
        scales=tuple(spec.anchor_scales),
        ratios=tuple(spec.anchor_ratios),
    )
    anchors = generate_anchors(grid, fh, fw)
    objectness = softmax(scores.data, axis=1)[:, 1]
    proposals, proposal_scores = generate_proposals(
        anchors,
        objectness,
        deltas.data,
        feats.image_w,
        feats.image_h,
        nms_iou=settings.nms_iou,
        pre_nms_top=settings.pre_nms_top,
        post_nms_top=settings.post_nms_top,
        min_size=settings.min_size,
    )
    return RPNOutput(
        scores=scores,
        deltas=deltas,
        anchors=anchors,
        proposals=proposals,
        proposal_scores=proposal_scores,
        features=feats,
    )


def fuse_roi_features(det_feat: Tensor, seg_feat: Tensor, roi: np.ndarray, grid: int) -> Tensor:
    """Sum of the region pooled from the detection map and, with doubled
    coordinates, from the twice-as-fine segmentation map.

    Args:
        det_feat: ``[1, C, h, w]``
        seg_feat: ``[1, C, 2h, 2w]``
        roi: ``(x0, y0, x1, y1)`` in detection-map cells
        grid: Pooling grid G

    Returns:
        ``[C, G, G]``

    Raises:
        ShapeError: The maps violate the 2x resolution relationship
    """
    _check_resolution(det_feat, seg_feat)
    roi = np.asarray(roi, dtype=np.float64).reshape(4)
    return add(roi_maxpool(det_feat, roi, grid), roi_maxpool(seg_feat, roi * 2.0, grid))


def forward_heads(
    model: Model,
    image: Tensor | np.ndarray,
    rois: np.ndarray,
    features: Features | None = None,
) -> DetectionOutput:
    """Classify and regress image-space regions; segment when the model can.

    Raises:
        InvalidProposalError: Empty region list
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if rois.shape[0] == 0:
        raise InvalidProposalError("forward_heads needs at least one region")
    feats = features or model.features(image)
    cls_scores, bbox_deltas = model.heads(model.pool_regions(feats, rois))
    seg_scores = model.segment_scores(feats) if feats.seg is not None else None
    return DetectionOutput(
        cls_scores=cls_scores, bbox_deltas=bbox_deltas, rois=rois, seg_scores=seg_scores
    )


def postprocess_detections(
    output: DetectionOutput,
    image_w: float,
    image_h: float,
    settings: InferenceSettings | None = None,
) -> list[Box]:
    """Per-class decode, score floor and NMS; background deltas are never applied."""
    settings = settings or InferenceSettings()
    probs = output.class_probabilities()
    deltas = output.bbox_deltas.data
    detections: list[tuple[float, int, int, Box]] = []
    for cls in range(1, probs.shape[1]):
        decoded = decode_boxes(output.rois, deltas[:, 4 * cls : 4 * cls + 4])
        boxes, keep = clip_and_filter_proposals(decoded, image_w, image_h, 0.0, return_index=True)
        scores = probs[keep, cls]
        passing = np.flatnonzero(scores >= settings.score_floor)
        boxes, scores = boxes[passing], scores[passing]
        for rank, idx in enumerate(nms(boxes, scores, settings.nms_iou)):
            box = Box.from_array(boxes[idx], class_id=cls, score=float(scores[idx]))
            detections.append((-float(scores[idx]), cls, rank, box))
    detections.sort(key=lambda item: item[:3])
    return [item[3] for item in detections[: settings.max_detections]]


def detect(
    model: Model,
    image: Tensor | np.ndarray,
    proposal_settings: ProposalSettings | None = None,
    inference_settings: InferenceSettings | None = None,
) -> list[Box]:
    """Full inference: proposals, head scoring and postprocessing."""
    rpn_out = forward_rpn(model, image, proposal_settings)
    if rpn_out.proposals.shape[0] == 0:
        return []
    feats = rpn_out.features
    output = forward_heads(model, image, rpn_out.proposals, features=feats)
    return postprocess_detections(output, feats.image_w, feats.image_h, inference_settings)


def segment(model: Model, image: Tensor | np.ndarray) -> np.ndarray:
    """Upsampled segmentation scores ``[K, H, W]``.

    Raises:
        CapabilityError: The model has no segmentation stage
    """
    if not model.spec.has_segmentation:
        raise CapabilityError(f"variant {model.spec.variant!r} has no segmentation stage")
    return model.segment_scores(model.features(image)).data[0]


# -- checkpoints --------------------------------------------------------------------


def encode_checkpoint(model: Model) -> bytes:
    """Serialise ``model`` in the SNCK layout."""
    spec_text = model.spec.to_canonical_text().encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(spec_text)),
        spec_text,
        struct.pack("<I", len(model.params)),
    ]
    for name, p in model.params.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        parts.append(p.data.astype("<f4").tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """Write ``model`` to ``path`` atomically."""
    path = Path(path)
    payload = encode_checkpoint(model)
    atomic_write_bytes(path, payload)
    get_metrics_collector().record_io("checkpoint_save", path, len(model.params), len(payload))
    _get_logger().info("checkpoint_saved", path=str(path), tensors=len(model.params))
    return path


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, n: int, what: str) -> bytes:
        end = self.offset + n
        if end > len(self.payload):
            raise CheckpointError(
                f"{self.source}: truncated record reading {what} at byte {self.offset}"
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def u32(self, what: str) -> int:
        return int(struct.unpack("<I", self.take(4, what))[0])


def decode_checkpoint(
    payload: bytes, expected_spec: ModelSpec | None = None, source: str = "<checkpoint>"
) -> Model:
    """Parse an SNCK payload and validate it against a spec.

    Raises:
        CheckpointError: Bad magic, unsupported version, truncation, malformed
            tensor records (non-UTF-8 name, rank outside 1..4), missing or
            unexpected tensors, dimension mismatch, or spec mismatch
    """
    reader = _Reader(payload, source)
    if reader.take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic")
    version = reader.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{source}: version mismatch (file {version}, supported {CHECKPOINT_VERSION})"
        )
    spec_len = reader.u32("spec length")
    try:
        file_spec = ModelSpec.from_canonical_text(reader.take(spec_len, "spec").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: unreadable model spec: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    for _ in range(reader.u32("tensor count")):
        name_at = reader.offset
        raw_name = reader.take(reader.u32("name length"), "name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{source}: tensor name at byte {name_at} is not UTF-8") from e
        rank = reader.u32(f"{name} rank")
        if not 1 <= rank <= MAX_TENSOR_RANK:
            raise CheckpointError(
                f"{source}: {name} has rank {rank}, expected 1..{MAX_TENSOR_RANK}"
            )
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, f"{name} dims"))
        count = int(np.prod(dims))
        raw = reader.take(4 * count, f"{name} payload")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    if reader.offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - reader.offset} trailing bytes")

    spec = expected_spec or file_spec
    shapes = parameter_shapes(spec)
    missing = sorted(set(shapes) - set(tensors))
    if missing:
        raise CheckpointError(f"{source}: missing tensors: {', '.join(missing)}")
    unexpected = sorted(set(tensors) - set(shapes))
    if unexpected:
        raise CheckpointError(f"{source}: unexpected tensors: {', '.join(unexpected)}")
    for name, shape in shapes.items():
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"{source}: dim mismatch for {name}: file {tensors[name].shape}, spec {shape}"
            )
    if expected_spec is not None:
        ours = expected_spec.model_dump()
        theirs = file_spec.model_dump()
        differing = sorted(k for k in ours if ours[k] != theirs.get(k))
        if differing:
            raise CheckpointError(f"{source}: spec mismatch in {', '.join(differing)}")

    params = {
        name: Tensor(tensors[name].copy(), requires_grad=True, name=name) for name in shapes
    }
    return Model(spec, params)


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None) -> Model:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    payload = path.read_bytes()
    model = decode_checkpoint(payload, expected_spec, source=str(path))
    get_metrics_collector().record_io("checkpoint_load", path, len(model.params), len(payload))
    return model


def checkpoint_id(path: str | Path) -> str:
    """Short content hash identifying a checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
