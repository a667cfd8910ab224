"""Configuration management for stuffnet.

Uses pydantic-settings for type-safe configuration from environment variables
and ``section.key = value`` config files. Every section validates against a
closed schema, so a misspelled key is an error rather than a silent default.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from stuffnet.errors import ConfigError

VariantLiteral = Literal["baseline", "multitask", "fused"]
SizeBinLiteral = Literal["all", "small", "medium", "large"]


class RunSettings(BaseSettings):
    """Process-wide run settings."""

    seed: int = Field(default=0, ge=0, description="Master seed for every seeded component")
    deterministic: bool = Field(
        default=True, description="Global determinism flag (bit-identical reruns)"
    )
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = Field(
        default="INFO", description="Logging level"
    )
    structured_logging: bool = Field(default=False, description="Use structured JSON logs")

    model_config = SettingsConfigDict(env_prefix="STUFFNET_RUN_")


class ObjectClassSpec(BaseModel):
    """Appearance and context of one synthetic object class."""

    name: str
    stuff: str = Field(description="Canonical stuff class this object lives on")
    shape: Literal["rect", "ellipse", "triangle", "diamond"]
    color: tuple[float, float, float]


def _default_object_classes() -> list[ObjectClassSpec]:
    return [
        ObjectClassSpec(name="boat", stuff="water", shape="triangle", color=(0.85, 0.2, 0.15)),
        ObjectClassSpec(name="car", stuff="road", shape="rect", color=(0.95, 0.8, 0.1)),
        ObjectClassSpec(name="bird", stuff="sky", shape="diamond", color=(0.1, 0.1, 0.1)),
        ObjectClassSpec(name="cow", stuff="ground", shape="ellipse", color=(0.55, 0.3, 0.6)),
    ]


class SceneGenSpec(BaseSettings):
    """Synthetic objects-in-stuff-context scene generator configuration."""

    image_size: int = Field(default=64, ge=16, description="Square image side (px)")
    num_images: int = Field(default=500, ge=0, description="Number of scenes to generate")
    layout: Literal["bands", "blocks"] = Field(
        default="bands", description="Stuff layout rule: horizontal bands or rectangles"
    )
    min_regions: int = Field(default=2, ge=2, le=4, description="Minimum stuff regions")
    max_regions: int = Field(default=4, ge=2, le=4, description="Maximum stuff regions")
    min_objects: int = Field(default=1, ge=1, description="Minimum objects per scene")
    max_objects: int = Field(default=5, ge=1, description="Maximum objects per scene")
    rho: float = Field(
        default=0.9,
        ge=0.0,
        le=1.0,
        description="Context coupling: probability an object's class is set by its stuff",
    )
    small_fraction: float = Field(
        default=0.4, ge=0.0, le=1.0, description="Guaranteed fraction of small objects"
    )
    small_side: tuple[int, int] = Field(default=(6, 15), description="Small object side range")
    large_side: tuple[int, int] = Field(default=(16, 36), description="Other object side range")
    noise: float = Field(default=0.03, ge=0.0, le=0.5, description="Pixel noise std-dev")
    seg_regime: Literal["stuff", "stuff_and_things"] = Field(
        default="stuff", description="Stuff-only labels or stuff plus object classes"
    )
    object_classes: list[ObjectClassSpec] = Field(default_factory=_default_object_classes)
    seed: int = Field(default=0, ge=0, description="Generator seed")

    model_config = SettingsConfigDict(env_prefix="STUFFNET_DATA_")

    @model_validator(mode="after")
    def _check_ranges(self) -> SceneGenSpec:
        if self.max_regions < self.min_regions:
            raise ValueError("max_regions must be >= min_regions")
        if self.max_objects < self.min_objects:
            raise ValueError("max_objects must be >= min_objects")
        for name, (lo, hi) in (("small_side", self.small_side), ("large_side", self.large_side)):
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be an increasing range of positive sides")
            if hi > self.image_size:
                raise ValueError(f"{name} {hi} exceeds image_size {self.image_size}")
        if not self.object_classes:
            raise ValueError("object_classes must not be empty")
        return self


class ModelSpec(BaseSettings):
    """Declarative network configuration.

    ``det_subsample`` must equal ``2 ** (len(trunk_channels) - 1)``: every shared
    stage but the last ends with a stride-2 pool, and the fork after the last
    shared stage pools once more for detection only.
    """

    variant: VariantLiteral = Field(default="fused", description="Network variant")
    trunk_channels: list[int] = Field(
        default_factory=lambda: [8, 16, 16, 24],
        description="Conv widths per stage; the last stage exists once per branch",
    )
    det_subsample: int = Field(default=8, ge=2, description="Pixels per det-feature cell")
    seg_subsample: int = Field(default=4, ge=1, description="Pixels per seg-feature cell")
    num_classes: int = Field(default=5, ge=2, description="Object classes incl. background")
    num_seg_classes: int = Field(default=10, ge=2, description="Segmentation classes")
    roi_grid: int = Field(default=7, ge=1, description="RoI pooling grid G")
    rpn_hidden: int = Field(default=32, ge=1, description="RPN 3x3 conv width")
    fc_width: int = Field(default=64, ge=1, description="fc6/fc7 width")
    seg_hidden: int = Field(default=32, ge=1, description="Segmentation classifier width")
    seg_dilation: int = Field(default=2, ge=1, description="Dilation of the seg stage convs")
    anchor_scales: list[float] = Field(default_factory=lambda: [8.0, 16.0, 32.0])
    anchor_ratios: list[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    max_upsample_size: int = Field(default=4096, ge=1, description="Upsampling size ceiling")

    model_config = SettingsConfigDict(env_prefix="STUFFNET_MODEL_")

    @model_validator(mode="after")
    def _check_resolution(self) -> ModelSpec:
        if len(self.trunk_channels) < 2 or min(self.trunk_channels) < 1:
            raise ValueError("trunk_channels needs >= 2 positive stage widths")
        if self.det_subsample != 2 * self.seg_subsample:
            raise ValueError(
                f"det_subsample ({self.det_subsample}) must be 2 * seg_subsample "
                f"({self.seg_subsample})"
            )
        expected = 2 ** (len(self.trunk_channels) - 1)
        if self.det_subsample != expected:
            raise ValueError(
                f"det_subsample {self.det_subsample} does not match {len(self.trunk_channels)} "
                f"trunk stages (expected {expected})"
            )
        if not self.anchor_scales or not self.anchor_ratios:
            raise ValueError("anchor_scales and anchor_ratios must be non-empty")
        if min(self.anchor_scales) <= 0 or min(self.anchor_ratios) <= 0:
            raise ValueError("anchor scales and ratios must be positive")
        return self

    @property
    def has_segmentation(self) -> bool:
        return self.variant != "baseline"

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_canonical_text(self) -> str:
        """Serialize as sorted ``key=value`` lines with JSON values."""
        dumped = self.model_dump(mode="json")
        return "\n".join(f"{key}={json.dumps(dumped[key])}" for key in sorted(dumped))

    @classmethod
    def from_canonical_text(cls, text: str) -> ModelSpec:
        """Inverse of :meth:`to_canonical_text`."""
        values: dict[str, Any] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"model spec line {lineno}: expected key=value")
            values[key.strip()] = json.loads(raw)
        return cls(**values)


class ProposalSettings(BaseSettings):
    """RPN proposal pipeline (decode, clip, NMS)."""

    nms_iou: float = Field(default=0.7, gt=0.0, le=1.0, description="Proposal NMS IoU")
    pre_nms_top: int = Field(default=2000, ge=1, description="Boxes kept before NMS")
    post_nms_top: int = Field(default=300, ge=1, description="Boxes kept after NMS")
    min_size: float = Field(default=2.0, ge=0.0, description="Minimum proposal side (px)")

    model_config = SettingsConfigDict(env_prefix="STUFFNET_PROPOSALS_")


class InferenceSettings(BaseSettings):
    """Detection postprocessing."""

    score_floor: float = Field(default=0.05, ge=0.0, le=1.0, description="Minimum class score")
    nms_iou: float = Field(default=0.3, gt=0.0, le=1.0, description="Per-class NMS IoU")
    max_detections: int = Field(default=100, ge=1, description="Detections kept per image")
    render_threshold: float = Field(
        default=0.5, ge=0.0, le=1.0, description="Minimum score for drawn boxes"
    )

    model_config = SettingsConfigDict(env_prefix="STUFFNET_INFERENCE_")


class TrainConfig(BaseSettings):
    """SGD training configuration (one image per iteration)."""

    iterations: int = Field(default=2000, ge=0, description="Total iterations")
    base_lr: float = Field(default=1e-3, ge=0.0, description="Learning rate before the step")
    lr_step: int = Field(default=1500, ge=0, description="Iteration of the lr step")
    lr_factor: float = Field(default=0.1, gt=0.0, description="Multiplier applied at the step")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0005, ge=0.0)
    rpn_batch: int = Field(default=256, ge=1)
    rpn_pos_fraction: float = Field(default=0.5, gt=0.0, le=1.0)
    rpn_pos_iou: float = Field(default=0.7, ge=0.0, le=1.0)
    rpn_neg_iou: float = Field(default=0.3, ge=0.0, le=1.0)
    head_batch: int = Field(default=128, ge=1)
    head_fg_fraction: float = Field(default=0.25, gt=0.0, le=1.0)
    head_fg_iou: float = Field(default=0.5, ge=0.0, le=1.0)
    head_bg_iou_lo: float = Field(default=0.1, ge=0.0, le=1.0)
    head_bg_iou_hi: float = Field(default=0.5, ge=0.0, le=1.0)
    include_gt_rois: bool = Field(
        default=True, description="Append ground-truth boxes to the head proposal pool"
    )
    rpn_cls_weight: float = Field(default=1.0, ge=0.0)
    rpn_reg_weight: float = Field(default=1.0, ge=0.0)
    head_cls_weight: float = Field(default=1.0, ge=0.0)
    head_reg_weight: float = Field(default=1.0, ge=0.0)
    seg_weight: float = Field(default=1.0, ge=0.0)
    frozen_prefixes: list[str] = Field(
        default_factory=list, description="Parameter-name prefixes trained with lr 0"
    )
    seed: int = Field(default=0, ge=0, description="Sampling/minibatch seed")
    log_every: int = Field(default=100, ge=1, description="Iterations between log events")

    model_config = SettingsConfigDict(env_prefix="STUFFNET_TRAIN_")

    @model_validator(mode="after")
    def _check_thresholds(self) -> TrainConfig:
        if not self.rpn_neg_iou < self.rpn_pos_iou:
            raise ValueError("rpn_neg_iou must be < rpn_pos_iou")
        if not self.head_bg_iou_lo <= self.head_bg_iou_hi <= 1.0:
            raise ValueError("head background range must be ordered")
        return self

    @classmethod
    def paper_preset(cls, **overrides: Any) -> TrainConfig:
        """70k iterations, lr 1e-3 dropping x0.1 at 50k."""
        values: dict[str, Any] = {"iterations": 70000, "base_lr": 1e-3, "lr_step": 50000}
        return cls(**{**values, **overrides})

    @classmethod
    def desk_preset(cls, **overrides: Any) -> TrainConfig:
        """2000 iterations, lr 1e-3 dropping x0.1 at 1500."""
        values: dict[str, Any] = {"iterations": 2000, "base_lr": 1e-3, "lr_step": 1500}
        return cls(**{**values, **overrides})


class EvalSettings(BaseSettings):
    """Detection and segmentation evaluation."""

    iou_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    small_ceiling: float = Field(default=32.0 * 32.0, gt=0.0, description="Small area ceiling")
    medium_ceiling: float = Field(default=96.0 * 96.0, gt=0.0, description="Medium area ceiling")
    ap_method: Literal["all_points", "eleven_point"] = Field(default="all_points")
    size_bin: SizeBinLiteral = Field(default="all")
    scale_to_image: bool = Field(
        default=True,
        description="Scale the ceilings by image side / 128 (desk-scale images)",
    )

    model_config = SettingsConfigDict(env_prefix="STUFFNET_EVAL_")

    @model_validator(mode="after")
    def _check_bins(self) -> EvalSettings:
        if not self.small_ceiling < self.medium_ceiling:
            raise ValueError("small_ceiling must be < medium_ceiling")
        return self


class PathSettings(BaseSettings):
    """Filesystem locations used by the CLI."""

    dataset_dir: str = Field(default="data/train")
    test_dataset_dir: str = Field(default="data/test")
    checkpoint: str = Field(default="runs/stuffnet.snck")
    loss_log: str = Field(default="runs/loss.log")
    metrics_path: str | None = Field(default=None, description="Export metrics JSON here")
    out_dir: str = Field(default="runs/render")
    hallucinated_subdir: str = Field(default="seg_hallucinated")

    model_config = SettingsConfigDict(env_prefix="STUFFNET_PATHS_")


class BenchmarkSettings(BaseSettings):
    """Desk-scale context benchmark."""

    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    train_images: int = Field(default=500, ge=1)
    test_images: int = Field(default=200, ge=1)
    rho: float = Field(default=0.9, ge=0.0, le=1.0)
    iterations: int = Field(default=2000, ge=0)
    lr_step: int = Field(default=1500, ge=0)

    model_config = SettingsConfigDict(env_prefix="STUFFNET_BENCHMARK_")


class StuffNetConfig(BaseSettings):
    """Root configuration for stuffnet."""

    run: RunSettings = Field(default_factory=RunSettings)
    data: SceneGenSpec = Field(default_factory=SceneGenSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    proposals: ProposalSettings = Field(default_factory=ProposalSettings)
    train: TrainConfig = Field(default_factory=TrainConfig)
    inference: InferenceSettings = Field(default_factory=InferenceSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    paths: PathSettings = Field(default_factory=PathSettings)
    benchmark: BenchmarkSettings = Field(default_factory=BenchmarkSettings)

    model_config = SettingsConfigDict(
        env_prefix="STUFFNET_",
        env_nested_delimiter="__",
        case_sensitive=False,
    )


SECTIONS: dict[str, type[BaseSettings]] = {
    "run": RunSettings,
    "data": SceneGenSpec,
    "model": ModelSpec,
    "proposals": ProposalSettings,
    "train": TrainConfig,
    "inference": InferenceSettings,
    "eval": EvalSettings,
    "paths": PathSettings,
    "benchmark": BenchmarkSettings,
}


def parse_value(raw: str) -> Any:
    """Parse a config value: JSON first, then comma lists, then the raw string.

    Example:
        >>> parse_value("0.5")
        0.5
        >>> parse_value("8, 16, 32")
        [8, 16, 32]
        >>> parse_value("fused")
        'fused'
    """
    text = raw.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(part) for part in text.split(",") if part.strip()]
    lowered = text.lower()
    if lowered in ("true", "on", "yes"):
        return True
    if lowered in ("false", "off", "no"):
        return False
    return text


def _assign(tree: dict[str, dict[str, Any]], dotted: str, value: Any, where: str) -> None:
    section, sep, key = dotted.strip().partition(".")
    if not sep or not key:
        raise ConfigError(f"{where}: expected 'section.key', got {dotted.strip()!r}")
    if section not in SECTIONS:
        raise ConfigError(f"{where}: unknown config section {section!r}")
    if key not in SECTIONS[section].model_fields:
        raise ConfigError(f"{where}: unknown config key {section}.{key}")
    tree.setdefault(section, {})[key] = value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, Any]]:
    """Parse ``section.key = value`` lines into a nested dict.

    Raises:
        ConfigError: On a malformed line or an unknown section/key.
    """
    tree: dict[str, dict[str, Any]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        dotted, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        _assign(tree, dotted, parse_value(raw), f"{source}:{lineno}")
    return tree


def parse_overrides(pairs: list[str] | tuple[str, ...]) -> dict[str, dict[str, Any]]:
    """Parse ``section.key=value`` flag overrides."""
    tree: dict[str, dict[str, Any]] = {}
    for pair in pairs:
        dotted, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r}: expected section.key=value")
        _assign(tree, dotted, parse_value(raw), f"override {pair!r}")
    return tree


def _merge(base: dict[str, dict[str, Any]], extra: dict[str, dict[str, Any]]) -> None:
    for section, values in extra.items():
        base.setdefault(section, {}).update(values)


def load_config(
    config_file: Path | None = None,
    overrides: dict[str, dict[str, Any]] | None = None,
) -> StuffNetConfig:
    """Load configuration from environment, an optional file and overrides.

    Args:
        config_file: Optional path to a ``section.key = value`` file
        overrides: Optional nested dict applied last

    Returns:
        Loaded and validated configuration

    Raises:
        ConfigError: Malformed file or unknown key
        pydantic.ValidationError: A value fails its field constraints

    Example:
        >>> config = load_config(overrides={"model": {"variant": "baseline"}})
        >>> config.model.variant
        'baseline'
    """
    tree: dict[str, dict[str, Any]] = {}
    if config_file is not None:
        try:
            text = Path(config_file).read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"{config_file}: not valid UTF-8") from e
        _merge(tree, parse_config_text(text, str(config_file)))
    if overrides:
        _merge(tree, overrides)

    sections: dict[str, Any] = {}
    for name, values in tree.items():
        # Section objects are built here so environment values fill in unset keys.
        sections[name] = SECTIONS[name](**values)
    return StuffNetConfig(**sections)


def get_default_config() -> StuffNetConfig:
    """Get default configuration (for testing/development).

    Returns:
        StuffNetConfig with all default values
    """
    return StuffNetConfig()


def desk_size_ceilings(image_size: int, reference_size: int = 128) -> tuple[float, float]:
    """Scale the 32x32 / 96x96 area ceilings proportionally to the image side."""
    factor = image_size / reference_size
    return (math.floor(32 * factor) ** 2, math.floor(96 * factor) ** 2)


__all__ = [
    "BenchmarkSettings",
    "ConfigError",
    "EvalSettings",
    "InferenceSettings",
    "ModelSpec",
    "ObjectClassSpec",
    "PathSettings",
    "ProposalSettings",
    "RunSettings",
    "SceneGenSpec",
    "StuffNetConfig",
    "TrainConfig",
    "ValidationError",
    "desk_size_ceilings",
    "get_default_config",
    "load_config",
    "parse_config_text",
    "parse_overrides",
    "parse_value",
]
