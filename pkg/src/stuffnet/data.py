"""Synthetic objects-in-stuff scenes, the stuff vocabulary, and dataset files.

Directory layout written and read here::

    images/NNNNNN.ppm   binary P6, 8-bit RGB
    seg/NNNNNN.pgm      binary P5, class index per pixel (255 = ignore); optional
    boxes/NNNNNN.txt    one "class x0 y0 x1 y1" line per object
    manifest.txt        one sample id per line
    vocab.txt           segmentation classes, index order
    objects.txt         object classes, background first
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, overload

import numpy as np
import structlog

from stuffnet.boxgeom import Box, boxes_to_array
from stuffnet.config import ObjectClassSpec, SceneGenSpec
from stuffnet.errors import DatasetFormatError
from stuffnet.layers import IGNORE_LABEL
from stuffnet.metrics import get_metrics_collector
from stuffnet.tensor import rng_for
from stuffnet.utils import atomic_write_bytes, atomic_write_text, format_sample_id

logger = None


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


CANONICAL_STUFF: tuple[str, ...] = (
    "background",
    "wall",
    "floor",
    "water",
    "tree",
    "sky",
    "road",
    "ground",
    "building",
    "mountain",
)

MERGE_TABLE: dict[str, str] = {
    "sidewalk": "road",
    "runway": "road",
    "ceiling": "wall",
    "grass": "ground",
    "platform": "ground",
    "sand": "ground",
    "snow": "ground",
}

STUFF_COLORS: dict[str, tuple[float, float, float]] = {
    "background": (0.0, 0.0, 0.0),
    "wall": (0.72, 0.66, 0.58),
    "floor": (0.58, 0.44, 0.30),
    "water": (0.16, 0.34, 0.74),
    "tree": (0.12, 0.44, 0.16),
    "sky": (0.56, 0.76, 0.95),
    "road": (0.36, 0.36, 0.40),
    "ground": (0.46, 0.60, 0.26),
    "building": (0.60, 0.32, 0.26),
    "mountain": (0.46, 0.42, 0.40),
}

# Appearance shared by every class when context alone decides the label.
AMBIGUOUS_COLOR: tuple[float, float, float] = (0.95, 0.95, 0.95)
SHAPES: tuple[str, ...] = ("rect", "ellipse", "triangle", "diamond")

PGM_IGNORE = 255
_PLACEMENT_ATTEMPTS = 50
_MAX_OVERLAP = 0.2


@dataclass(frozen=True)
class StuffVocabulary:
    """Ordered segmentation class names plus the raw-name merge table."""

    names: tuple[str, ...] = CANONICAL_STUFF
    merge_table: Mapping[str, str] = field(default_factory=lambda: dict(MERGE_TABLE))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"unknown class {name!r}") from None

    def canonical(self, raw: str) -> str:
        if raw in self.names:
            return raw
        if raw in self.merge_table:
            return self.merge_table[raw]
        raise ValueError(f"unknown stuff class: {raw}")

    @classmethod
    def for_regime(cls, regime: str, object_classes: Sequence[ObjectClassSpec]) -> StuffVocabulary:
        """Stuff-only vocabulary, or stuff followed by the object classes."""
        if regime == "stuff":
            return cls()
        return cls(names=CANONICAL_STUFF + tuple(c.name for c in object_classes))


def merge_stuff_classes(raw_label_map: Any, vocab: StuffVocabulary | None = None) -> np.ndarray:
    """Map raw stuff names to canonical names through the merge table.

    Raises:
        ValueError: Names neither canonical nor in the table (all are listed)

    Example:
        >>> merge_stuff_classes(["sidewalk", "water"]).tolist()
        ['road', 'water']
    """
    vocab = vocab or StuffVocabulary()
    raw = np.asarray(raw_label_map, dtype=str)
    uniques, inverse = np.unique(raw, return_inverse=True)
    unknown = sorted(
        str(u) for u in uniques if u not in vocab.names and u not in vocab.merge_table
    )
    if unknown:
        raise ValueError(f"unknown stuff classes: {', '.join(unknown)}")
    mapped = np.array([vocab.canonical(str(u)) for u in uniques], dtype=str)
    return mapped[inverse].reshape(raw.shape)


@dataclass
class SceneSample:
    """One image with its object boxes and (optionally) its stuff labels."""

    sample_id: str
    image: np.ndarray  # [3, H, W] in [0, 1]
    boxes: tuple[Box, ...]
    seg_labels: np.ndarray | None = None  # [H, W], IGNORE_LABEL allowed

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be [3,H,W], got {self.image.shape}")
        self.boxes = tuple(self.boxes)
        for box in self.boxes:
            if not (0 <= box.x0 < box.x1 <= self.width and 0 <= box.y0 < box.y1 <= self.height):
                raise ValueError(f"{self.sample_id}: box {box.coords()} outside the image")
        if self.seg_labels is not None:
            self.seg_labels = np.asarray(self.seg_labels, dtype=np.int64)
            if self.seg_labels.shape != (self.height, self.width):
                raise ValueError(
                    f"{self.sample_id}: label map {self.seg_labels.shape} "
                    f"does not match image {self.height}x{self.width}"
                )

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    def gt_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)

    def gt_classes(self) -> np.ndarray:
        return np.array([int(b.class_id or 0) for b in self.boxes], dtype=np.int64)

    def without_segmentation(self) -> SceneSample:
        return SceneSample(self.sample_id, self.image, self.boxes, None)


class SceneDataset(Sequence[SceneSample]):
    """Samples plus the class vocabularies they were written with."""

    def __init__(
        self,
        samples: Iterable[SceneSample] = (),
        vocab: StuffVocabulary | None = None,
        object_names: Sequence[str] = (),
        root: Path | None = None,
    ):
        self.samples = list(samples)
        self.vocab = vocab or StuffVocabulary()
        self.object_names = tuple(object_names)
        self.root = root

    @overload
    def __getitem__(self, index: int) -> SceneSample: ...

    @overload
    def __getitem__(self, index: slice) -> Sequence[SceneSample]: ...

    def __getitem__(self, index: int | slice) -> SceneSample | Sequence[SceneSample]:
        return self.samples[index]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[SceneSample]:
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    @property
    def has_segmentation(self) -> bool:
        return bool(self.samples) and all(s.seg_labels is not None for s in self.samples)


# -- scene generation ----------------------------------------------------------------


def object_names(spec: SceneGenSpec) -> tuple[str, ...]:
    """Object class names in id order, background first."""
    return ("background", *(c.name for c in spec.object_classes))


def seg_class_count(spec: SceneGenSpec) -> int:
    return len(StuffVocabulary.for_regime(spec.seg_regime, spec.object_classes))


def _stuff_pool(spec: SceneGenSpec) -> list[str]:
    pool: list[str] = []
    for c in spec.object_classes:
        if c.stuff not in CANONICAL_STUFF:
            raise ValueError(f"object class {c.name!r} lives on unknown stuff {c.stuff!r}")
        if c.stuff not in pool:
            pool.append(c.stuff)
    return pool


def _layout_regions(
    spec: SceneGenSpec, rng: np.random.Generator, n: int
) -> list[tuple[int, int, int, int]]:
    """Split the image into ``n`` rectangles ``(y0, x0, y1, x1)``."""
    size = spec.image_size
    margin = max(2, size // 8)
    if spec.layout == "bands":
        cuts = np.sort(rng.choice(np.arange(margin, size - margin), size=n - 1, replace=False))
        edges = [0, *cuts.tolist(), size]
        return [(edges[i], 0, edges[i + 1], size) for i in range(n)]

    regions = [(0, 0, size, size)]
    while len(regions) < n:
        areas = [(y1 - y0) * (x1 - x0) for y0, x0, y1, x1 in regions]
        y0, x0, y1, x1 = regions.pop(int(np.argmax(areas)))
        if y1 - y0 >= x1 - x0:
            cut = int(rng.integers(y0 + (y1 - y0) // 4, y1 - (y1 - y0) // 4 + 1))
            regions += [(y0, x0, cut, x1), (cut, x0, y1, x1)]
        else:
            cut = int(rng.integers(x0 + (x1 - x0) // 4, x1 - (x1 - x0) // 4 + 1))
            regions += [(y0, x0, y1, cut), (y0, cut, y1, x1)]
    return regions


def shape_mask(shape: str, height: int, width: int) -> np.ndarray:
    """Boolean footprint of a shape filling an ``height x width`` box."""
    v, u = np.meshgrid(
        (np.arange(height) + 0.5) / height, (np.arange(width) + 0.5) / width, indexing="ij"
    )
    if shape == "rect":
        return np.ones((height, width), dtype=bool)
    if shape == "ellipse":
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    if shape == "triangle":
        return np.abs(u - 0.5) <= v / 2 + 1e-9
    if shape == "diamond":
        return np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5 + 1e-9
    raise ValueError(f"unknown shape {shape!r}")


Rect = tuple[int, int, int, int]


def _overlap_ok(candidate: Rect, placed: list[Rect]) -> bool:
    x0, y0, x1, y1 = candidate
    area = (x1 - x0) * (y1 - y0)
    for px0, py0, px1, py1 in placed:
        iw = min(x1, px1) - max(x0, px0)
        ih = min(y1, py1) - max(y0, py0)
        if iw <= 0 or ih <= 0:
            continue
        inter = iw * ih
        if inter > _MAX_OVERLAP * area or inter > _MAX_OVERLAP * (px1 - px0) * (py1 - py0):
            return False
    return True


def generate_scene(spec: SceneGenSpec, index: int) -> SceneSample:
    """Generate scene ``index``; pure in ``(spec.seed, index)``.

    With probability ``rho`` an object's class is the one tied to the stuff under
    its centre and it is drawn with the shared ambiguous appearance; otherwise the
    class is uniform and drawn with its own shape and colour.

    Small objects are placed first. When crowding skips placements, trailing large
    objects are dropped until at least ``small_fraction`` of the placed ones are small.

    Raises:
        ValueError: Negative index, or an object class on unknown stuff
    """
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    rng = rng_for(spec.seed, "scene", index)
    size = spec.image_size
    pool = _stuff_pool(spec)
    classes = spec.object_classes
    vocab = StuffVocabulary.for_regime(spec.seg_regime, classes)

    n_regions = int(rng.integers(spec.min_regions, spec.max_regions + 1))
    stuff_names = rng.choice(pool, size=n_regions, replace=len(pool) < n_regions).tolist()
    image = np.zeros((3, size, size))
    stuff = np.zeros((size, size), dtype=np.int64)
    for (y0, x0, y1, x1), name in zip(_layout_regions(spec, rng, n_regions), stuff_names):
        image[:, y0:y1, x0:x1] = np.asarray(STUFF_COLORS[name])[:, None, None]
        stuff[y0:y1, x0:x1] = vocab.index(name)
    labels = stuff.copy()

    n_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n_small = math.ceil(spec.small_fraction * n_objects)
    placed: list[Rect] = []
    placed_small = 0
    for j in range(n_objects):
        lo, hi = spec.small_side if j < n_small else spec.large_side
        for _ in range(_PLACEMENT_ATTEMPTS):
            w, h = (int(s) for s in rng.integers(lo, hi + 1, size=2))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            if _overlap_ok((x0, y0, x0 + w, y0 + h), placed):
                break
        else:
            _get_logger().debug("object_skipped", index=index, object=j, small=j < n_small)
            continue
        placed.append((x0, y0, x0 + w, y0 + h))
        placed_small += j < n_small
    # small objects come first; drop large ones until the small share holds again
    while len(placed) > placed_small and placed_small < spec.small_fraction * len(placed):
        _get_logger().debug("object_dropped", index=index, object=len(placed) - 1)
        placed.pop()

    boxes: list[Box] = []
    for x0, y0, x1, y1 in placed:
        w, h = x1 - x0, y1 - y0
        under = CANONICAL_STUFF[stuff[y0 + h // 2, x0 + w // 2]]
        if rng.random() < spec.rho:
            candidates = [i for i, c in enumerate(classes) if c.stuff == under]
            cls_idx = candidates[int(rng.integers(len(candidates)))]
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            color = AMBIGUOUS_COLOR
        else:
            cls_idx = int(rng.integers(len(classes)))
            shape = classes[cls_idx].shape
            color = classes[cls_idx].color

        mask = shape_mask(shape, h, w)
        patch = image[:, y0 : y0 + h, x0 : x0 + w]
        patch[:, mask] = np.asarray(color)[:, None]
        if spec.seg_regime == "stuff_and_things":
            labels[y0 : y0 + h, x0 : x0 + w] = vocab.index(classes[cls_idx].name)
        boxes.append(Box(float(x0), float(y0), float(x0 + w), float(y0 + h), class_id=cls_idx + 1))

    if spec.noise > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise, size=image.shape), 0.0, 1.0)
    return SceneSample(format_sample_id(index), image, tuple(boxes), labels)


def generate_dataset(spec: SceneGenSpec, start: int = 0) -> SceneDataset:
    """Generate ``spec.num_images`` scenes with indices ``start, start+1, ...``."""
    samples = [generate_scene(spec, start + i) for i in range(spec.num_images)]
    _get_logger().info(
        "dataset_generated",
        images=len(samples),
        seed=spec.seed,
        rho=spec.rho,
        regime=spec.seg_regime,
    )
    return SceneDataset(
        samples,
        vocab=StuffVocabulary.for_regime(spec.seg_regime, spec.object_classes),
        object_names=object_names(spec),
    )


@dataclass
class DatasetSummary:
    images: int
    objects: int
    per_class: dict[str, int]
    per_size_bin: dict[str, int]

    @property
    def small_fraction(self) -> float:
        return self.per_size_bin.get("small", 0) / self.objects if self.objects else 0.0


def summarize(
    samples: Sequence[SceneSample],
    names: Sequence[str],
    small_ceiling: float,
    medium_ceiling: float,
) -> DatasetSummary:
    """Object counts per class and per size bin (area strictly below the ceiling)."""
    per_class: Counter[str] = Counter()
    per_bin: Counter[str] = Counter({"small": 0, "medium": 0, "large": 0})
    for sample in samples:
        for box in sample.boxes:
            cid = int(box.class_id or 0)
            per_class[names[cid] if cid < len(names) else str(cid)] += 1
            if box.area < small_ceiling:
                per_bin["small"] += 1
            elif box.area < medium_ceiling:
                per_bin["medium"] += 1
            else:
                per_bin["large"] += 1
    return DatasetSummary(
        images=len(samples),
        objects=sum(per_class.values()),
        per_class=dict(sorted(per_class.items())),
        per_size_bin=dict(per_bin),
    )


# -- PNM codecs --------------------------------------------------------------------------


def encode_ppm(image: np.ndarray) -> bytes:
    """Quantise a ``[3,H,W]`` image in [0, 1] to binary P6."""
    _, h, w = image.shape
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.transpose(1, 2, 0).tobytes()


def encode_pgm(labels: np.ndarray) -> bytes:
    """Binary P5 of a class-index map; the ignore label is written as 255."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.max() >= PGM_IGNORE or labels.min() < IGNORE_LABEL):
        raise ValueError(f"label values must lie in [{IGNORE_LABEL}, {PGM_IGNORE - 1}]")
    h, w = labels.shape
    gray = np.where(labels == IGNORE_LABEL, PGM_IGNORE, labels).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def _parse_pnm(payload: bytes, magic: bytes, source: str) -> tuple[int, int, int]:
    """Return ``(width, height, data_offset)`` of a binary PNM with maxval 255."""
    if payload[:2] != magic:
        raise DatasetFormatError(f"{source}: expected {magic.decode()} magic at byte 0")
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        if payload[pos : pos + 1] == b"#":
            while pos < len(payload) and payload[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(payload) and payload[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{source}: malformed header at byte {start}")
        tokens.append(int(payload[start:pos]))
    if pos >= len(payload) or not payload[pos : pos + 1].isspace():
        raise DatasetFormatError(f"{source}: malformed header at byte {pos}")
    width, height, maxval = tokens
    if maxval != 255:
        raise DatasetFormatError(f"{source}: maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise DatasetFormatError(f"{source}: image dims must be positive, got {width}x{height}")
    return width, height, pos + 1


def decode_ppm(payload: bytes, source: str = "<ppm>") -> np.ndarray:
    width, height, offset = _parse_pnm(payload, b"P6", source)
    expected = width * height * 3
    found = len(payload) - offset
    if found != expected:
        raise DatasetFormatError(
            f"{source}: expected {expected} bytes of pixel data at byte {offset}, found {found}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8, offset=offset).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def decode_pgm(payload: bytes, source: str = "<pgm>") -> np.ndarray:
    width, height, offset = _parse_pnm(payload, b"P5", source)
    expected = width * height
    found = len(payload) - offset
    if found != expected:
        raise DatasetFormatError(
            f"{source}: expected {expected} bytes of pixel data at byte {offset}, found {found}"
        )
    gray = np.frombuffer(payload, dtype=np.uint8, offset=offset).reshape(height, width)
    labels = gray.astype(np.int64)
    labels[gray == PGM_IGNORE] = IGNORE_LABEL
    return labels


# -- dataset files ---------------------------------------------------------------------------


def format_box_line(box: Box) -> str:
    """Annotation line for one box.

    Example:
        >>> format_box_line(Box(4.0, 4.0, 20.0, 20.0, class_id=3))
        '3 4.0 4.0 20.0 20.0'
    """
    return f"{box.class_id} {float(box.x0)!r} {float(box.y0)!r} {float(box.x1)!r} {float(box.y1)!r}"


def parse_box_lines(text: str, source: str = "<boxes>") -> tuple[Box, ...]:
    boxes = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise DatasetFormatError(f"{source}:{lineno}: expected 5 fields, got {len(fields)}")
        try:
            class_id = int(fields[0])
            x0, y0, x1, y1 = (float(v) for v in fields[1:])
        except ValueError as e:
            raise DatasetFormatError(f"{source}:{lineno}: {e}") from e
        box = Box(x0, y0, x1, y1, class_id=class_id)
        if class_id < 1 or not box.is_valid:
            raise DatasetFormatError(f"{source}:{lineno}: invalid box {line.strip()!r}")
        boxes.append(box)
    return tuple(boxes)


def _read_name_list(path: Path) -> list[str]:
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def write_dataset(
    samples: Sequence[SceneSample] | SceneDataset,
    directory: str | Path,
    vocab: StuffVocabulary | None = None,
    object_classes: Sequence[str] | None = None,
    with_segmentation: bool = True,
) -> Path:
    """Write samples in the dataset layout; output bytes depend only on the inputs.

    Args:
        samples: Samples to write
        directory: Dataset root (created if missing)
        vocab: Segmentation vocabulary; defaults to the dataset's own
        object_classes: Object names, background first
        with_segmentation: False writes a dataset without ``seg/``
    """
    root = Path(directory)
    if isinstance(samples, SceneDataset):
        vocab = vocab or samples.vocab
        object_classes = object_classes or samples.object_names
    vocab = vocab or StuffVocabulary()
    collector = get_metrics_collector()
    size_bytes = 0
    with collector.timer("write_dataset"):
        for sample in samples:
            image_bytes = encode_ppm(sample.image)
            atomic_write_bytes(root / "images" / f"{sample.sample_id}.ppm", image_bytes)
            box_text = "".join(format_box_line(b) + "\n" for b in sample.boxes)
            atomic_write_text(root / "boxes" / f"{sample.sample_id}.txt", box_text)
            size_bytes += len(image_bytes) + len(box_text)
            if with_segmentation and sample.seg_labels is not None:
                seg_bytes = encode_pgm(sample.seg_labels)
                atomic_write_bytes(root / "seg" / f"{sample.sample_id}.pgm", seg_bytes)
                size_bytes += len(seg_bytes)
        atomic_write_text(root / "manifest.txt", "".join(f"{s.sample_id}\n" for s in samples))
        atomic_write_text(root / "vocab.txt", "".join(f"{n}\n" for n in vocab.names))
        if object_classes:
            atomic_write_text(root / "objects.txt", "".join(f"{n}\n" for n in object_classes))
    collector.record_io("write_dataset", str(root), len(samples), size_bytes)
    _get_logger().info(
        "dataset_written", path=str(root), images=len(samples), seg=with_segmentation
    )
    return root


def read_dataset(directory: str | Path, load_segmentation: bool = True) -> SceneDataset:
    """Read a dataset directory; a directory without a manifest is an empty dataset.

    Raises:
        FileNotFoundError: ``directory`` does not exist, or a listed file is missing
        DatasetFormatError: Malformed file (message names the file and line or byte)
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    manifest = root / "manifest.txt"
    vocab_path = root / "vocab.txt"
    vocab = StuffVocabulary(tuple(_read_name_list(vocab_path))) if vocab_path.exists() else None
    objects_path = root / "objects.txt"
    names = _read_name_list(objects_path) if objects_path.exists() else []
    if not manifest.exists():
        _get_logger().info("dataset_empty", path=str(root))
        return SceneDataset([], vocab, names, root)

    samples = []
    for sample_id in _read_name_list(manifest):
        image_path = root / "images" / f"{sample_id}.ppm"
        image = decode_ppm(image_path.read_bytes(), str(image_path))
        box_path = root / "boxes" / f"{sample_id}.txt"
        boxes = parse_box_lines(box_path.read_text(encoding="utf-8"), str(box_path))
        seg_path = root / "seg" / f"{sample_id}.pgm"
        seg = None
        if load_segmentation and seg_path.exists():
            seg = decode_pgm(seg_path.read_bytes(), str(seg_path))
        try:
            samples.append(SceneSample(sample_id, image, boxes, seg))
        except ValueError as e:
            raise DatasetFormatError(f"{root}: {e}") from e
    get_metrics_collector().record_io("read_dataset", str(root), len(samples), 0)
    _get_logger().info("dataset_read", path=str(root), images=len(samples))
    return SceneDataset(samples, vocab, names, root)


def write_label_maps(
    maps: Sequence[np.ndarray], ids: Sequence[str], directory: str | Path
) -> list[Path]:
    """Write one P5 map per id under ``directory``."""
    if len(maps) != len(ids):
        raise ValueError(f"{len(maps)} maps for {len(ids)} ids")
    root = Path(directory)
    paths = []
    for labels, sample_id in zip(maps, ids):
        path = root / f"{sample_id}.pgm"
        atomic_write_bytes(path, encode_pgm(labels))
        paths.append(path)
    return paths


def read_label_maps(directory: str | Path, ids: Sequence[str]) -> list[np.ndarray]:
    root = Path(directory)
    maps = []
    for sample_id in ids:
        path = root / f"{sample_id}.pgm"
        maps.append(decode_pgm(path.read_bytes(), str(path)))
    return maps
