"""Desk-scale context benchmark.

Two experiments on the synthetic scenes, repeated per seed:

* variant comparison: baseline, multitask and fused trained on the same data,
  evaluated overall and per size bin;
* feature constraining: a fused model trained on dataset A hallucinates stuff
  labels for dataset B (which has none), then keeps training on B against those
  labels; compared with a baseline trained on B alone.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import structlog

from stuffnet.config import (
    BenchmarkSettings,
    ModelSpec,
    SceneGenSpec,
    StuffNetConfig,
    TrainConfig,
)
from stuffnet.data import SceneDataset, StuffVocabulary, generate_dataset
from stuffnet.evalkit import SizeBins, evaluate_map, ground_truth_of, predict_dataset
from stuffnet.metrics import get_metrics_collector
from stuffnet.model import Model, build
from stuffnet.train import hallucinate_labels, pixel_agreement, train, train_constrained
from stuffnet.utils import format_table

logger = None

VARIANTS: tuple[str, ...] = ("baseline", "multitask", "fused")
BIN_NAMES: tuple[str, ...] = ("all", "small", "medium", "large")


def _get_logger() -> Any:
    """Get or create logger instance."""
    global logger
    if logger is None:
        logger = structlog.get_logger()
    return logger


@dataclass
class VariantResult:
    variant: str
    seed: int
    map_by_bin: dict[str, float]


@dataclass
class ComparisonReport:
    results: list[VariantResult] = field(default_factory=list)

    def mean_map(self, variant: str, size_bin: str = "all") -> float:
        values = [r.map_by_bin[size_bin] for r in self.results if r.variant == variant]
        return float(np.mean(values)) if values else 0.0

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.results))


@dataclass
class ConstrainingResult:
    seed: int
    pixel_agreement: float
    constrained_map: float
    baseline_map: float


@dataclass
class ConstrainingReport:
    results: list[ConstrainingResult] = field(default_factory=list)

    def mean(self, attr: str) -> float:
        values = [getattr(r, attr) for r in self.results]
        return float(np.mean(values)) if values else 0.0


def _scene_spec(
    config: StuffNetConfig, settings: BenchmarkSettings, seed: int, n: int
) -> SceneGenSpec:
    return config.data.model_copy(update={"seed": seed, "rho": settings.rho, "num_images": n})


def _model_spec(config: StuffNetConfig, variant: str) -> ModelSpec:
    """``variant`` with class counts matching the generated scenes."""
    classes = config.data.object_classes
    vocab = StuffVocabulary.for_regime(config.data.seg_regime, classes)
    return config.model.model_copy(
        update={"variant": variant, "num_classes": len(classes) + 1, "num_seg_classes": len(vocab)}
    )


def _train_config(config: StuffNetConfig, settings: BenchmarkSettings, seed: int) -> TrainConfig:
    return config.train.model_copy(
        update={"iterations": settings.iterations, "lr_step": settings.lr_step, "seed": seed}
    )


def _splits(
    config: StuffNetConfig, settings: BenchmarkSettings, seed: int, parts: Sequence[tuple[str, int]]
) -> dict[str, SceneDataset]:
    """Disjoint index ranges of one seeded scene stream."""
    out = {}
    start = 0
    for name, count in parts:
        out[name] = generate_dataset(_scene_spec(config, settings, seed, count), start=start)
        start += count
    return out


def _evaluate_bins(model: Model, test: SceneDataset, config: StuffNetConfig) -> dict[str, float]:
    bins = SizeBins.for_image_size(config.data.image_size)
    detections = predict_dataset(model, test, config.proposals, config.inference)
    gts = ground_truth_of(test)
    classes = list(range(1, model.spec.num_classes))
    return {
        size_bin: evaluate_map(
            detections,
            gts,
            classes,
            size_bin=size_bin,
            bins=bins,
            iou_thresh=config.eval.iou_threshold,
            method=config.eval.ap_method,
        ).mean_ap
        for size_bin in BIN_NAMES
    }


def run_variant_comparison(
    settings: BenchmarkSettings,
    config: StuffNetConfig,
    variants: Sequence[str] = VARIANTS,
) -> ComparisonReport:
    """Train every variant per seed on identical data and report mAP per size bin."""
    report = ComparisonReport()
    collector = get_metrics_collector()
    for seed in settings.seeds:
        data = _splits(
            config,
            settings,
            seed,
            [("train", settings.train_images), ("test", settings.test_images)],
        )
        cfg = _train_config(config, settings, seed)
        for variant in variants:
            spec = _model_spec(config, variant)
            with collector.timer(f"benchmark_{variant}"):
                trained = train(build(spec, seed), data["train"], cfg, config.proposals).model
                maps = _evaluate_bins(trained, data["test"], config)
            report.results.append(VariantResult(variant=variant, seed=seed, map_by_bin=maps))
            _get_logger().info("benchmark_variant_done", variant=variant, seed=seed, **maps)
    return report


def run_feature_constraining(
    settings: BenchmarkSettings, config: StuffNetConfig
) -> ConstrainingReport:
    """Dataset A (stuff labels) -> hallucinate on B -> constrained fused vs baseline on B."""
    report = ConstrainingReport()
    n = settings.train_images
    for seed in settings.seeds:
        data = _splits(config, settings, seed, [("a", n), ("b", n), ("test", settings.test_images)])
        dataset_b = SceneDataset(
            [s.without_segmentation() for s in data["b"]],
            data["b"].vocab,
            data["b"].object_names,
        )
        cfg = _train_config(config, settings, seed)
        fused_spec = _model_spec(config, "fused")
        baseline_spec = _model_spec(config, "baseline")

        model_a = train(build(fused_spec, seed), data["a"], cfg, config.proposals).model
        images_b = [s.image for s in dataset_b]
        labels = hallucinate_labels(model_a, images_b, source=f"seed{seed}-dataset-a")
        constrained = train_constrained(model_a, dataset_b, labels, cfg, config.proposals).model
        baseline = train(build(baseline_spec, seed), dataset_b, cfg, config.proposals).model

        result = ConstrainingResult(
            seed=seed,
            pixel_agreement=pixel_agreement(constrained, images_b, labels),
            constrained_map=_evaluate_bins(constrained, data["test"], config)["all"],
            baseline_map=_evaluate_bins(baseline, data["test"], config)["all"],
        )
        report.results.append(result)
        _get_logger().info(
            "benchmark_constraining_done",
            seed=seed,
            agreement=round(result.pixel_agreement, 4),
            constrained_map=round(result.constrained_map, 4),
            baseline_map=round(result.baseline_map, 4),
        )
    return report


def format_comparison(report: ComparisonReport) -> str:
    rows = [
        [variant, *(f"{100 * report.mean_map(variant, b):.1f}" for b in BIN_NAMES)]
        for variant in report.variants
    ]
    return format_table(["variant", *BIN_NAMES], rows)


def format_constraining(report: ConstrainingReport) -> str:
    rows = [
        [
            str(r.seed),
            f"{100 * r.pixel_agreement:.1f}",
            f"{100 * r.constrained_map:.1f}",
            f"{100 * r.baseline_map:.1f}",
        ]
        for r in report.results
    ]
    rows.append(
        [
            "mean",
            f"{100 * report.mean('pixel_agreement'):.1f}",
            f"{100 * report.mean('constrained_map'):.1f}",
            f"{100 * report.mean('baseline_map'):.1f}",
        ]
    )
    return format_table(["seed", "agreement", "constrained", "baseline"], rows)
