"""Command-line interface for the stuffnet pipeline.

Usage:
    stuffnet gen-data --out data/train --num-images 500
    stuffnet train --dataset data/train --checkpoint runs/fused.snck
    stuffnet hallucinate --checkpoint runs/fused.snck --dataset data/b
    stuffnet eval --checkpoint runs/fused.snck --dataset data/test --size-bin small
    stuffnet infer --checkpoint runs/fused.snck --dataset data/test --out dets.txt
    stuffnet render --checkpoint runs/fused.snck --dataset data/test --id 000003
    stuffnet benchmark --seeds 0,1,2

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 capability or label mismatch.
"""

from __future__ import annotations

import functools
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, NoReturn, TypeVar

import click
import structlog
from pydantic import BaseModel, ValidationError

from stuffnet.benchmark import (
    format_comparison,
    format_constraining,
    run_feature_constraining,
    run_variant_comparison,
)
from stuffnet.config import StuffNetConfig, TrainConfig, load_config, parse_overrides
from stuffnet.data import (
    SceneDataset,
    SceneSample,
    generate_dataset,
    object_names,
    read_dataset,
    read_label_maps,
    summarize,
    write_dataset,
    write_label_maps,
)
from stuffnet.errors import (
    CapabilityError,
    CheckpointError,
    ConfigError,
    DatasetFormatError,
    MissingLabelsError,
)
from stuffnet.evalkit import (
    SizeBins,
    evaluate_map,
    format_report_kv,
    format_report_table,
    ground_truth_of,
    predict_dataset,
    read_detections,
    segment_dataset_metrics,
    write_detections,
)
from stuffnet.metrics import configure_logging, get_metrics_collector
from stuffnet.model import Model, build, checkpoint_id, load_checkpoint, save_checkpoint
from stuffnet.render import render_overlay, write_render
from stuffnet.tensor import set_deterministic
from stuffnet.train import (
    HallucinatedLabels,
    check_class_counts,
    hallucinate_labels,
    train,
    train_constrained,
    write_loss_log,
)

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CAPABILITY = 4

F = TypeVar("F", bound=Callable[..., Any])
M = TypeVar("M", bound=BaseModel)


def _fail(code: int, message: str) -> NoReturn:
    logger.debug("command_failed", exit_code=code)
    click.echo(click.style(f"✗ {message}", fg="red"), err=True)
    sys.exit(code)


def handle_errors(fn: F) -> F:
    """Map library exceptions onto the stable exit codes."""

    @functools.wraps(fn)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ValidationError) as e:
            get_metrics_collector().record_error("cli", e)
            _fail(EXIT_CONFIG, f"configuration error: {e}")
        except CapabilityError as e:
            get_metrics_collector().record_error("cli", e)
            _fail(EXIT_CAPABILITY, str(e))
        except (OSError, DatasetFormatError, CheckpointError) as e:
            get_metrics_collector().record_error("cli", e)
            _fail(EXIT_IO, f"I/O error: {e}")

    return wrapper  # type: ignore[return-value]


def _updated(section: M, **changes: Any) -> M:
    """Re-validated copy of a config section with the non-None changes applied."""
    values = {k: v for k, v in changes.items() if v is not None}
    if not values:
        return section
    return type(section)(**{**section.model_dump(), **values})


def _without(section: BaseModel, *keys: str) -> dict[str, Any]:
    return {k: v for k, v in section.model_dump().items() if k not in keys}


def _finish(config: StuffNetConfig) -> None:
    if config.paths.metrics_path:
        get_metrics_collector().save_metrics(Path(config.paths.metrics_path))


def _class_names(dataset: SceneDataset, model: Model | None) -> dict[int, str]:
    if dataset.object_names:
        return dict(enumerate(dataset.object_names))
    count = model.spec.num_classes if model is not None else 0
    return {c: str(c) for c in range(count)}


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    default=None,
    help="Config file of 'section.key = value' lines",
)
@click.option("--seed", type=int, default=None, help="Master seed (run, data and train)")
@click.option(
    "--deterministic",
    type=click.Choice(["on", "off"]),
    default=None,
    help="Fixed-order reductions for bit-identical reruns",
)
@click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="SECTION.KEY=VALUE",
    help="Override a config value (repeatable)",
)
@click.pass_context
@handle_errors
def cli(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    deterministic: str | None,
    overrides: tuple[str, ...],
) -> None:
    """StuffNet: object detection with stuff-segmentation context."""
    tree = parse_overrides(overrides)
    if seed is not None:
        for section in ("run", "data", "train"):
            tree.setdefault(section, {})["seed"] = seed
    if deterministic is not None:
        tree.setdefault("run", {})["deterministic"] = deterministic == "on"
    config = load_config(config_path, tree)
    configure_logging(config.run.log_level, config.run.structured_logging)
    set_deterministic(config.run.deterministic)
    ctx.obj = config


@cli.command("gen-data")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Dataset directory")
@click.option("--num-images", "-n", type=int, default=None, help="Scenes to generate")
@click.option("--rho", type=float, default=None, help="Context coupling strength in [0, 1]")
@click.option("--start", type=int, default=0, show_default=True, help="First scene index")
@click.option(
    "--seg/--no-seg", default=True, help="Write stuff label maps (--no-seg: dataset without them)"
)
@click.pass_obj
@handle_errors
def gen_data(
    config: StuffNetConfig,
    out: Path | None,
    num_images: int | None,
    rho: float | None,
    start: int,
    seg: bool,
) -> None:
    """Generate a synthetic objects-in-stuff dataset."""
    spec = _updated(config.data, num_images=num_images, rho=rho)
    out = out or Path(config.paths.dataset_dir)
    dataset = generate_dataset(spec, start=start)
    write_dataset(dataset, out, with_segmentation=seg)

    bins = SizeBins.for_image_size(spec.image_size)
    summary = summarize(dataset, object_names(spec), bins.small_ceiling, bins.medium_ceiling)
    click.echo(click.style(f"✓ wrote {summary.images} images to {out}", fg="green"))
    click.echo(
        "size bins: " + " ".join(f"{name}={count}" for name, count in summary.per_size_bin.items())
    )
    click.echo("classes: " + " ".join(f"{name}={n}" for name, n in summary.per_class.items()))
    _finish(config)


def _read_nonempty(path: Path, load_segmentation: bool = True) -> SceneDataset:
    dataset = read_dataset(path, load_segmentation=load_segmentation)
    if not dataset:
        raise DatasetFormatError(f"{path}: dataset is empty")
    return dataset


@cli.command("train")
@click.option("--dataset", "dataset_dir", type=click.Path(path_type=Path), default=None)
@click.option(
    "--checkpoint", type=click.Path(path_type=Path), default=None, help="Output checkpoint"
)
@click.option("--loss-log", type=click.Path(path_type=Path), default=None)
@click.option(
    "--variant", type=click.Choice(["baseline", "multitask", "fused"]), default=None
)
@click.option("--preset", type=click.Choice(["desk", "paper"]), default=None)
@click.option("--iterations", type=int, default=None)
@click.option(
    "--hallucinated-labels",
    type=click.Path(path_type=Path),
    default=None,
    help="Directory of hallucinated maps; switches to feature-constrained training",
)
@click.option(
    "--init-checkpoint",
    type=click.Path(path_type=Path),
    default=None,
    help="Start from these weights instead of a fresh build",
)
@click.pass_obj
@handle_errors
def train_cmd(
    config: StuffNetConfig,
    dataset_dir: Path | None,
    checkpoint: Path | None,
    loss_log: Path | None,
    variant: str | None,
    preset: str | None,
    iterations: int | None,
    hallucinated_labels: Path | None,
    init_checkpoint: Path | None,
) -> None:
    """Train a model (plain or feature-constrained)."""
    dataset_dir = dataset_dir or Path(config.paths.dataset_dir)
    checkpoint = checkpoint or Path(config.paths.checkpoint)
    loss_log = loss_log or Path(config.paths.loss_log)
    spec = _updated(config.model, variant=variant)

    cfg = config.train
    if preset == "paper":
        cfg = TrainConfig.paper_preset(**_without(cfg, "iterations", "lr_step", "base_lr"))
    elif preset == "desk":
        cfg = TrainConfig.desk_preset(**_without(cfg, "iterations", "lr_step", "base_lr"))
    cfg = _updated(cfg, iterations=iterations)

    dataset = _read_nonempty(dataset_dir, load_segmentation=hallucinated_labels is None)
    model = (
        load_checkpoint(init_checkpoint, spec) if init_checkpoint else build(spec, config.run.seed)
    )
    click.echo(click.style(f"=== Training {spec.variant} on {len(dataset)} images ===", bold=True))

    if hallucinated_labels is not None:
        try:
            maps = read_label_maps(hallucinated_labels, dataset.ids)
        except FileNotFoundError as e:
            raise MissingLabelsError(f"hallucinated labels incomplete: {e}") from e
        source = hallucinated_labels.name
        labels = [HallucinatedLabels(m, source) for m in maps]
        result = train_constrained(model, dataset, labels, cfg, config.proposals)
    else:
        result = train(model, dataset, cfg, config.proposals)

    save_checkpoint(result.model, checkpoint)
    write_loss_log(result.log, loss_log)
    click.echo(f"checkpoint: {checkpoint} ({checkpoint_id(checkpoint)})")
    click.echo(f"loss log: {loss_log}")
    click.echo(f"final smoothed loss: {result.final_smoothed_loss:.6f}")
    _finish(config)


@cli.command("hallucinate")
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory")
@click.pass_obj
@handle_errors
def hallucinate(
    config: StuffNetConfig, checkpoint: Path | None, dataset_dir: Path | None, out: Path | None
) -> None:
    """Write argmax segmentation maps of a trained model for every dataset image."""
    checkpoint = checkpoint or Path(config.paths.checkpoint)
    dataset_dir = dataset_dir or Path(config.paths.dataset_dir)
    out = out or dataset_dir / config.paths.hallucinated_subdir
    model = load_checkpoint(checkpoint)
    dataset = _read_nonempty(dataset_dir, load_segmentation=False)
    labels = hallucinate_labels(model, [s.image for s in dataset], source=checkpoint_id(checkpoint))
    write_label_maps([lab.labels for lab in labels], dataset.ids, out)
    click.echo(click.style(f"✓ wrote {len(labels)} label maps to {out}", fg="green"))
    _finish(config)


@cli.command("eval")
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(path_type=Path), default=None)
@click.option(
    "--size-bin", type=click.Choice(["all", "small", "medium", "large"]), default=None
)
@click.option(
    "--detections-file",
    type=click.Path(path_type=Path),
    default=None,
    help="Evaluate a detection dump instead of running the model",
)
@click.option("--ap-method", type=click.Choice(["all_points", "eleven_point"]), default=None)
@click.pass_obj
@handle_errors
def eval_cmd(
    config: StuffNetConfig,
    checkpoint: Path | None,
    dataset_dir: Path | None,
    size_bin: str | None,
    detections_file: Path | None,
    ap_method: str | None,
) -> None:
    """Evaluate detection mAP (optionally per size bin) and segmentation IoU."""
    settings = _updated(config.eval, size_bin=size_bin, ap_method=ap_method)
    dataset = _read_nonempty(dataset_dir or Path(config.paths.test_dataset_dir))

    model: Model | None = None
    if detections_file is not None:
        detections = read_detections(detections_file)
    else:
        model = load_checkpoint(checkpoint or Path(config.paths.checkpoint))
        check_class_counts(model.spec, dataset)
        detections = predict_dataset(model, dataset, config.proposals, config.inference)

    names = _class_names(dataset, model)
    bins = (
        SizeBins.for_image_size(dataset[0].width)
        if settings.scale_to_image
        else SizeBins.from_settings(settings)
    )
    report = evaluate_map(
        detections,
        ground_truth_of(dataset),
        [c for c in names if c > 0],
        size_bin=settings.size_bin,
        bins=bins,
        iou_thresh=settings.iou_threshold,
        method=settings.ap_method,
        class_names=names,
    )
    if model is not None and dataset.has_segmentation:
        report.seg = segment_dataset_metrics(model, dataset)

    click.echo(click.style("=== Evaluation ===", bold=True))
    if report.is_empty:
        click.echo(
            f"warning: no ground truth in size bin {report.size_bin!r}; mAP reported as 0"
        )
    click.echo(format_report_table(report))
    click.echo()
    click.echo(format_report_kv(report))
    _finish(config)


@cli.command("infer")
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(path_type=Path), default=None)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Detection dump")
@click.option("--id", "ids", multiple=True, help="Restrict to these sample ids")
@click.pass_obj
@handle_errors
def infer(
    config: StuffNetConfig,
    checkpoint: Path | None,
    dataset_dir: Path | None,
    out: Path,
    ids: tuple[str, ...],
) -> None:
    """Run detection and write 'image_id class score x0 y0 x1 y1' lines."""
    model = load_checkpoint(checkpoint or Path(config.paths.checkpoint))
    dataset = _read_nonempty(dataset_dir or Path(config.paths.test_dataset_dir), False)
    samples = _select(dataset, ids)
    detections = predict_dataset(model, samples, config.proposals, config.inference)
    write_detections(detections, out)
    total = sum(len(v) for v in detections.values())
    click.echo(click.style(f"✓ {total} detections on {len(samples)} images -> {out}", fg="green"))
    _finish(config)


def _select(dataset: SceneDataset, ids: tuple[str, ...]) -> list[SceneSample]:
    if not ids:
        return list(dataset)
    by_id = {s.sample_id: s for s in dataset}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise FileNotFoundError(f"unknown sample ids: {', '.join(missing)}")
    return [by_id[i] for i in ids]


@cli.command("render")
@click.option("--checkpoint", type=click.Path(path_type=Path), default=None)
@click.option("--dataset", "dataset_dir", type=click.Path(path_type=Path), default=None)
@click.option("--id", "ids", multiple=True, help="Sample ids to render (default: all)")
@click.option("--out-dir", type=click.Path(path_type=Path), default=None)
@click.pass_obj
@handle_errors
def render(
    config: StuffNetConfig,
    checkpoint: Path | None,
    dataset_dir: Path | None,
    ids: tuple[str, ...],
    out_dir: Path | None,
) -> None:
    """Write P6 overlays: segmentation at 50% alpha plus detection borders."""
    model = load_checkpoint(checkpoint or Path(config.paths.checkpoint))
    dataset = _read_nonempty(dataset_dir or Path(config.paths.test_dataset_dir), False)
    out_dir = out_dir or Path(config.paths.out_dir)
    for sample in _select(dataset, ids):
        result = render_overlay(model, sample.image, config.proposals, config.inference)
        path = write_render(result, out_dir / f"{sample.sample_id}.ppm")
        click.echo(f"{path}: {len(result.detections)} detections")
    _finish(config)


@cli.command("benchmark")
@click.option("--seeds", default=None, help="Comma-separated seeds")
@click.option("--train-images", type=int, default=None)
@click.option("--test-images", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--lr-step", type=int, default=None)
@click.option("--skip-constraining", is_flag=True, help="Only run the variant comparison")
@click.pass_obj
@handle_errors
def benchmark(
    config: StuffNetConfig,
    seeds: str | None,
    train_images: int | None,
    test_images: int | None,
    iterations: int | None,
    lr_step: int | None,
    skip_constraining: bool,
) -> None:
    """Desk-scale comparison of the variants and of feature constraining."""
    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()] if seeds else None
    except ValueError as e:
        raise ConfigError(f"--seeds must be comma-separated integers, got {seeds!r}") from e
    settings = _updated(
        config.benchmark,
        seeds=seed_list,
        train_images=train_images,
        test_images=test_images,
        iterations=iterations,
        lr_step=lr_step,
    )
    click.echo(click.style("=== Variant comparison (mAP %) ===", bold=True))
    click.echo(format_comparison(run_variant_comparison(settings, config)))
    if not skip_constraining:
        click.echo()
        click.echo(click.style("=== Feature constraining (dataset B) ===", bold=True))
        click.echo(format_constraining(run_feature_constraining(settings, config)))
    _finish(config)


if __name__ == "__main__":
    cli()
