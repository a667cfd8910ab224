"""Integration tests for the stuffnet command line."""

import numpy as np
import pytest
from click.testing import CliRunner

from stuffnet.boxgeom import Box
from stuffnet.cli import EXIT_CAPABILITY, EXIT_CONFIG, EXIT_IO, cli
from stuffnet.data import read_dataset, read_label_maps
from stuffnet.evalkit import parse_report_kv, write_detections
from stuffnet.model import load_checkpoint
from stuffnet.train import hallucinate_labels

TINY_CONFIG = """\
# 16x16 scenes and a three-stage network
run.log_level = WARNING
data.image_size = 16
data.num_images = 3
data.max_objects = 2
data.small_side = 3, 6
data.large_side = 7, 10
model.trunk_channels = 3, 4, 4
model.det_subsample = 4
model.seg_subsample = 2
model.roi_grid = 2
model.rpn_hidden = 4
model.fc_width = 6
model.seg_hidden = 4
model.anchor_scales = 4, 8
model.anchor_ratios = [1.0]
proposals.pre_nms_top = 64
proposals.post_nms_top = 16
proposals.min_size = 1
train.iterations = 2
train.lr_step = 1
train.rpn_batch = 16
train.head_batch = 8
train.log_every = 1
"""


@pytest.fixture
def runner():
    """Click test runner."""
    return CliRunner()


@pytest.fixture
def config_file(tmp_path):
    """Config file for tiny runs."""
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def run(runner, config_file):
    """Invoke the CLI with the tiny config."""

    def _run(*args):
        return runner.invoke(cli, ["--config", str(config_file), *map(str, args)])

    return _run


@pytest.fixture
def workspace(run, tmp_path):
    """Train and test datasets plus a fused checkpoint trained on the former."""
    paths = {
        "train": tmp_path / "train",
        "test": tmp_path / "test",
        "ckpt": tmp_path / "fused.snck",
        "log": tmp_path / "loss.log",
    }
    assert run("gen-data", "--out", paths["train"]).exit_code == 0
    assert run("gen-data", "--out", paths["test"], "--start", 100).exit_code == 0
    result = run(
        "train",
        "--dataset",
        paths["train"],
        "--checkpoint",
        paths["ckpt"],
        "--loss-log",
        paths["log"],
    )
    assert result.exit_code == 0, result.output
    return paths


def _tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.mark.integration
class TestGenData:
    """Tests for the gen-data command."""

    def test_writes_dataset(self, run, tmp_path):
        """Test the dataset and its summary."""
        result = run("gen-data", "--out", tmp_path / "ds", "-n", 4)

        assert result.exit_code == 0, result.output
        assert "✓ wrote 4 images" in result.output
        assert "size bins: small=" in result.output
        assert len(read_dataset(tmp_path / "ds")) == 4

    def test_byte_identical_reruns(self, run, tmp_path):
        """Test one seed always writes the same bytes."""
        run("gen-data", "--out", tmp_path / "a")
        run("gen-data", "--out", tmp_path / "b")

        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_seed_changes_data(self, runner, config_file, tmp_path):
        """Test the master seed reaches the generator."""
        for seed, name in ((0, "a"), (1, "b")):
            args = ["--config", str(config_file), "--seed", str(seed)]
            runner.invoke(cli, [*args, "gen-data", "--out", str(tmp_path / name)])

        assert _tree_bytes(tmp_path / "a") != _tree_bytes(tmp_path / "b")

    def test_without_segmentation(self, run, tmp_path):
        """Test --no-seg leaves out the label maps."""
        run("gen-data", "--out", tmp_path / "ds", "--no-seg")

        assert not read_dataset(tmp_path / "ds").has_segmentation


@pytest.mark.integration
@pytest.mark.slow
class TestTrainAndEvaluate:
    """Tests for train, eval, infer and render."""

    def test_train_outputs(self, workspace):
        """Test the checkpoint and one loss-log line per iteration."""
        assert workspace["ckpt"].stat().st_size > 0
        lines = workspace["log"].read_text().splitlines()
        assert len(lines) == 2

    def test_training_is_reproducible(self, run, workspace, tmp_path):
        """Test a rerun writes an identical checkpoint."""
        result = run(
            "train",
            "--dataset",
            workspace["train"],
            "--checkpoint",
            tmp_path / "again.snck",
            "--loss-log",
            tmp_path / "again.log",
        )

        assert result.exit_code == 0, result.output
        assert (tmp_path / "again.snck").read_bytes() == workspace["ckpt"].read_bytes()
        assert (tmp_path / "again.log").read_text() == workspace["log"].read_text()

    def test_eval(self, run, workspace):
        """Test the table and the key=value block, with segmentation metrics."""
        result = run("eval", "--checkpoint", workspace["ckpt"], "--dataset", workspace["test"])

        assert result.exit_code == 0, result.output
        assert "=== Evaluation ===" in result.output
        values = parse_report_kv(result.output)
        assert 0.0 <= float(values["map"]) <= 1.0
        assert "seg.mean_iou" in values

    def test_empty_bin_warning(self, run, workspace):
        """Test a bin without ground truth is reported as 0 with a warning."""
        result = run(
            "eval",
            "--checkpoint",
            workspace["ckpt"],
            "--dataset",
            workspace["test"],
            "--size-bin",
            "large",
        )

        assert result.exit_code == 0, result.output
        assert "warning: no ground truth in size bin 'large'" in result.output
        assert parse_report_kv(result.output)["map"] == "0.000000"

    def test_dump_matches_model_eval(self, run, workspace, tmp_path):
        """Test evaluating a detection dump gives the model's own mAP."""
        dump = tmp_path / "dets.txt"
        infer = run(
            "infer", "--checkpoint", workspace["ckpt"], "--dataset", workspace["test"],
            "--out", dump,
        )
        direct = run("eval", "--checkpoint", workspace["ckpt"], "--dataset", workspace["test"])
        from_dump = run("eval", "--dataset", workspace["test"], "--detections-file", dump)

        assert infer.exit_code == 0, infer.output
        assert from_dump.exit_code == 0, from_dump.output
        direct_map = parse_report_kv(direct.output)["map"]
        assert parse_report_kv(from_dump.output)["map"] == direct_map

    def test_oracle_detections(self, run, workspace, tmp_path):
        """Test ground truth fed back as detections scores mAP 1 in both formats."""
        dataset = read_dataset(workspace["test"])
        dump = write_detections(
            {
                s.sample_id: [Box(*b.coords(), class_id=b.class_id, score=1.0) for b in s.boxes]
                for s in dataset
            },
            tmp_path / "oracle.txt",
        )

        result = run("eval", "--dataset", workspace["test"], "--detections-file", dump)

        assert result.exit_code == 0, result.output
        values = parse_report_kv(result.output)
        assert values["map"] == "1.000000"
        table_row = next(line for line in result.output.splitlines() if line.startswith("all "))
        assert table_row.split()[-1] == f"{float(values['map']):.4f}"

    def test_hallucinate_matches_library(self, run, workspace, tmp_path):
        """Test written maps are deterministic and equal the in-process labels."""
        first = run(
            "hallucinate", "--checkpoint", workspace["ckpt"], "--dataset", workspace["test"],
            "--out", tmp_path / "a",
        )
        run(
            "hallucinate", "--checkpoint", workspace["ckpt"], "--dataset", workspace["test"],
            "--out", tmp_path / "b",
        )

        assert first.exit_code == 0, first.output
        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
        dataset = read_dataset(workspace["test"], load_segmentation=False)
        expected = hallucinate_labels(
            load_checkpoint(workspace["ckpt"]), [s.image for s in dataset]
        )
        written = read_label_maps(tmp_path / "a", dataset.ids)
        for lab, got in zip(expected, written):
            assert np.array_equal(lab.labels, got)

    def test_render(self, run, workspace, tmp_path):
        """Test one P6 overlay per requested id."""
        out = tmp_path / "render"

        result = run(
            "render",
            "--checkpoint",
            workspace["ckpt"],
            "--dataset",
            workspace["test"],
            "--id",
            "000101",
            "--out-dir",
            out,
        )

        assert result.exit_code == 0, result.output
        assert [p.name for p in out.iterdir()] == ["000101.ppm"]
        assert (out / "000101.ppm").read_bytes().startswith(b"P6\n16 16\n255\n")

    def test_feature_constraining(self, run, workspace, tmp_path):
        """Test hallucinating labels for an unlabelled set and training on them."""
        dataset_b = tmp_path / "b"
        run("gen-data", "--out", dataset_b, "--start", 50, "--no-seg")

        hallucinate = run("hallucinate", "--checkpoint", workspace["ckpt"], "--dataset", dataset_b)
        constrained = run(
            "train",
            "--dataset",
            dataset_b,
            "--hallucinated-labels",
            dataset_b / "seg_hallucinated",
            "--init-checkpoint",
            workspace["ckpt"],
            "--checkpoint",
            tmp_path / "constrained.snck",
            "--loss-log",
            tmp_path / "constrained.log",
        )

        assert hallucinate.exit_code == 0, hallucinate.output
        assert len(list((dataset_b / "seg_hallucinated").glob("*.pgm"))) == 3
        assert constrained.exit_code == 0, constrained.output
        assert (tmp_path / "constrained.snck").exists()


@pytest.mark.integration
class TestExitCodes:
    """Tests for the stable exit codes."""

    def test_unknown_config_key(self, runner, tmp_path):
        """Test unknown keys are configuration errors."""
        result = runner.invoke(cli, ["--set", "model.depth=3", "gen-data", "--out", str(tmp_path)])

        assert result.exit_code == EXIT_CONFIG
        assert "unknown config key model.depth" in result.output

    def test_out_of_range_value(self, run, tmp_path):
        """Test field constraints are configuration errors."""
        result = run("gen-data", "--out", tmp_path / "ds", "--rho", "1.5")

        assert result.exit_code == EXIT_CONFIG
        assert "rho" in result.output

    def test_malformed_override(self, runner, tmp_path):
        """Test overrides need a section, a key and a value."""
        result = runner.invoke(cli, ["--set", "variant", "gen-data", "--out", str(tmp_path)])

        assert result.exit_code == EXIT_CONFIG

    def test_bad_seed_list(self, run):
        """Test benchmark seeds must be integers."""
        result = run("benchmark", "--seeds", "0,x")

        assert result.exit_code == EXIT_CONFIG
        assert "--seeds" in result.output

    def test_missing_dataset(self, run, tmp_path):
        """Test a missing dataset directory is an I/O error."""
        result = run("train", "--dataset", tmp_path / "nope", "--checkpoint", tmp_path / "c")

        assert result.exit_code == EXIT_IO
        assert "✗ I/O error" in result.output

    def test_empty_dataset(self, run, tmp_path):
        """Test a directory without samples is an I/O error."""
        (tmp_path / "empty").mkdir()

        result = run("train", "--dataset", tmp_path / "empty", "--checkpoint", tmp_path / "c")

        assert result.exit_code == EXIT_IO
        assert "dataset is empty" in result.output

    def test_corrupt_checkpoint(self, run, tmp_path):
        """Test an unreadable checkpoint is an I/O error."""
        run("gen-data", "--out", tmp_path / "ds")
        (tmp_path / "bad.snck").write_bytes(b"not a checkpoint")

        result = run("eval", "--checkpoint", tmp_path / "bad.snck", "--dataset", tmp_path / "ds")

        assert result.exit_code == EXIT_IO

    def test_unknown_sample_id(self, run, workspace, tmp_path):
        """Test rendering an id the dataset lacks is an I/O error."""
        result = run(
            "render",
            "--checkpoint",
            workspace["ckpt"],
            "--dataset",
            workspace["test"],
            "--id",
            "999999",
            "--out-dir",
            tmp_path / "r",
        )

        assert result.exit_code == EXIT_IO
        assert "unknown sample ids: 999999" in result.output

    def test_baseline_cannot_hallucinate(self, run, workspace, tmp_path):
        """Test hallucinating with a model without a seg stage is a capability error."""
        ckpt = tmp_path / "baseline.snck"
        trained = run(
            "train",
            "--dataset",
            workspace["train"],
            "--variant",
            "baseline",
            "--checkpoint",
            ckpt,
            "--loss-log",
            tmp_path / "b.log",
        )

        result = run("hallucinate", "--checkpoint", ckpt, "--dataset", workspace["test"])

        assert trained.exit_code == 0, trained.output
        assert result.exit_code == EXIT_CAPABILITY
        assert "no segmentation stage" in result.output

    def test_missing_hallucinated_maps(self, run, workspace, tmp_path):
        """Test constrained training without a map per sample is a capability error."""
        (tmp_path / "maps").mkdir()

        result = run(
            "train",
            "--dataset",
            workspace["train"],
            "--hallucinated-labels",
            tmp_path / "maps",
            "--checkpoint",
            tmp_path / "c.snck",
            "--loss-log",
            tmp_path / "c.log",
        )

        assert result.exit_code == EXIT_CAPABILITY
        assert "hallucinated labels incomplete" in result.output

    def test_seg_class_count_mismatch(self, run, tmp_path):
        """Test object-labelled maps on a ten-class model are a configuration error."""
        things = ("--set", "data.seg_regime=stuff_and_things")
        generated = run(*things, "gen-data", "--out", tmp_path / "ds")

        result = run(
            *things,
            "train",
            "--dataset",
            tmp_path / "ds",
            "--checkpoint",
            tmp_path / "c.snck",
            "--loss-log",
            tmp_path / "c.log",
        )

        assert generated.exit_code == 0, generated.output
        assert result.exit_code == EXIT_CONFIG
        assert "✗ configuration error" in result.output
        assert "model.num_seg_classes=14" in result.output
        assert not (tmp_path / "c.snck").exists()

    @pytest.mark.slow
    def test_things_regime_trains_with_matching_model(self, run, tmp_path):
        """Test the fourteen-class setup trains and evaluates end to end."""
        things = (
            "--set",
            "data.seg_regime=stuff_and_things",
            "--set",
            "model.num_seg_classes=14",
        )
        run(*things, "gen-data", "--out", tmp_path / "ds")

        trained = run(
            *things,
            "train",
            "--dataset",
            tmp_path / "ds",
            "--checkpoint",
            tmp_path / "c.snck",
            "--loss-log",
            tmp_path / "c.log",
        )
        evaluated = run(
            *things, "eval", "--checkpoint", tmp_path / "c.snck", "--dataset", tmp_path / "ds"
        )

        assert trained.exit_code == 0, trained.output
        assert evaluated.exit_code == 0, evaluated.output
        assert "seg.mean_iou" in parse_report_kv(evaluated.output)

    def test_unlabelled_fused_training(self, run, tmp_path):
        """Test training a segmenting model on unlabelled data is a capability error."""
        run("gen-data", "--out", tmp_path / "ds", "--no-seg")

        result = run(
            "train",
            "--dataset",
            tmp_path / "ds",
            "--checkpoint",
            tmp_path / "c.snck",
            "--loss-log",
            tmp_path / "c.log",
        )

        assert result.exit_code == EXIT_CAPABILITY


@pytest.mark.integration
@pytest.mark.slow
class TestBenchmarkCommand:
    """Tests for the benchmark command."""

    def test_variant_comparison_only(self, run):
        """Test a one-seed comparison prints every variant."""
        result = run(
            "benchmark",
            "--seeds",
            "0",
            "--train-images",
            2,
            "--test-images",
            1,
            "--iterations",
            1,
            "--lr-step",
            1,
            "--skip-constraining",
        )

        assert result.exit_code == 0, result.output
        assert "=== Variant comparison (mAP %) ===" in result.output
        for variant in ("baseline", "multitask", "fused"):
            assert variant in result.output
        assert "Feature constraining" not in result.output
