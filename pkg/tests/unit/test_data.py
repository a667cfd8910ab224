"""Unit tests for data module."""

import numpy as np
import pytest

from stuffnet.boxgeom import Box
from stuffnet.config import SceneGenSpec
from stuffnet.data import (
    CANONICAL_STUFF,
    SceneDataset,
    SceneSample,
    StuffVocabulary,
    decode_pgm,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    format_box_line,
    generate_dataset,
    generate_scene,
    merge_stuff_classes,
    object_names,
    parse_box_lines,
    read_dataset,
    read_label_maps,
    seg_class_count,
    shape_mask,
    summarize,
    write_dataset,
    write_label_maps,
)
from stuffnet.errors import DatasetFormatError
from stuffnet.layers import IGNORE_LABEL


def _tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()
    }


class TestVocabulary:
    """Tests for stuff vocabularies and the merge table."""

    def test_merge_known_names(self):
        """Test raw names map to canonical ones and canonical names pass through."""
        merged = merge_stuff_classes([["sidewalk", "water"], ["grass", "ceiling"]])

        assert merged.tolist() == [["road", "water"], ["ground", "wall"]]

    def test_merge_unknown_lists_all(self):
        """Test every unknown name is reported, sorted."""
        with pytest.raises(ValueError, match="unknown stuff classes: lava, moon"):
            merge_stuff_classes(["moon", "road", "lava"])

    def test_canonical_order(self):
        """Test background is class 0 and the stuff vocabulary has ten classes."""
        vocab = StuffVocabulary()

        assert len(vocab) == 10
        assert vocab.index("background") == 0
        assert vocab.canonical("runway") == "road"

    def test_unknown_index(self):
        """Test looking up an unknown name fails."""
        with pytest.raises(ValueError, match="unknown class"):
            StuffVocabulary().index("lava")

    def test_things_regime(self):
        """Test object classes follow the stuff classes."""
        spec = SceneGenSpec(seg_regime="stuff_and_things")
        vocab = StuffVocabulary.for_regime("stuff_and_things", spec.object_classes)

        assert vocab.names[:10] == CANONICAL_STUFF
        assert vocab.names[10:] == ("boat", "car", "bird", "cow")
        assert seg_class_count(spec) == 14

    def test_object_names(self):
        """Test object ids put background first."""
        assert object_names(SceneGenSpec()) == ("background", "boat", "car", "bird", "cow")


class TestShapes:
    """Tests for object footprints."""

    def test_rect_fills_box(self):
        """Test rectangles cover every pixel."""
        assert shape_mask("rect", 4, 6).all()

    def test_ellipse(self):
        """Test ellipses cover the centre but not the corners."""
        mask = shape_mask("ellipse", 9, 9)

        assert mask[4, 4]
        assert not mask[0, 0]
        assert not mask[8, 8]

    def test_triangle_widens_downward(self):
        """Test the triangle apex is at the top."""
        mask = shape_mask("triangle", 8, 8)

        assert mask[0].sum() < mask[-1].sum()

    def test_diamond(self):
        """Test diamonds touch the edge midpoints only."""
        mask = shape_mask("diamond", 9, 9)

        assert mask[4].all()
        assert not mask[0, 0]

    def test_unknown_shape(self):
        """Test unknown shapes are rejected."""
        with pytest.raises(ValueError, match="unknown shape"):
            shape_mask("star", 4, 4)


class TestSceneGeneration:
    """Tests for generate_scene and generate_dataset."""

    def test_pure_in_seed_and_index(self, tiny_scene_spec):
        """Test one (seed, index) always gives the same scene."""
        a = generate_scene(tiny_scene_spec, 2)
        b = generate_scene(tiny_scene_spec, 2)
        c = generate_scene(tiny_scene_spec, 3)

        assert np.array_equal(a.image, b.image)
        assert a.boxes == b.boxes
        assert np.array_equal(a.seg_labels, b.seg_labels)
        assert not np.array_equal(a.image, c.image)

    def test_negative_index(self, tiny_scene_spec):
        """Test scene indices are non-negative."""
        with pytest.raises(ValueError, match="index"):
            generate_scene(tiny_scene_spec, -1)

    def test_scene_contents(self):
        """Test boxes, classes, pixel range and labels of generated scenes."""
        spec = SceneGenSpec(image_size=32, num_images=8, small_side=(4, 8), large_side=(9, 16))

        for sample in generate_dataset(spec):
            assert sample.image.shape == (3, 32, 32)
            assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
            assert len(sample.boxes) <= spec.max_objects
            for box in sample.boxes:
                assert 1 <= box.class_id <= 4
                assert 0 <= box.x0 < box.x1 <= 32
                assert 4 <= box.width <= 16
            assert 0 <= sample.seg_labels.min() and sample.seg_labels.max() < 10

    def test_full_context_coupling(self):
        """Test rho 1 ties every object class to the stuff under its centre."""
        spec = SceneGenSpec(
            image_size=32, num_images=6, rho=1.0, small_side=(4, 8), large_side=(9, 16), seed=3
        )
        by_id = {i + 1: c for i, c in enumerate(spec.object_classes)}

        for sample in generate_dataset(spec):
            for box in sample.boxes:
                cy = int(box.y0) + int(box.height) // 2
                cx = int(box.x0) + int(box.width) // 2
                under = CANONICAL_STUFF[sample.seg_labels[cy, cx]]
                assert by_id[box.class_id].stuff == under

    def test_small_share_survives_crowding(self):
        """Test skipped placements never push the small share below small_fraction."""
        spec = SceneGenSpec(
            image_size=16,
            num_images=30,
            min_objects=6,
            max_objects=6,
            small_fraction=0.5,
            small_side=(6, 8),
            large_side=(9, 10),
        )

        for sample in generate_dataset(spec):
            small = sum(max(box.width, box.height) <= 8 for box in sample.boxes)
            assert sample.boxes
            assert small >= spec.small_fraction * len(sample.boxes)

    def test_things_regime_labels_objects(self):
        """Test object pixels carry object classes in the combined regime."""
        spec = SceneGenSpec(
            image_size=32,
            num_images=4,
            small_side=(4, 8),
            large_side=(9, 16),
            seg_regime="stuff_and_things",
        )

        for sample in generate_dataset(spec):
            for box in sample.boxes:
                region = sample.seg_labels[int(box.y0) : int(box.y1), int(box.x0) : int(box.x1)]
                assert (region == 9 + box.class_id).any()

    def test_dataset_ids_and_vocab(self, tiny_scene_spec):
        """Test sequential ids from the start index and attached vocabularies."""
        dataset = generate_dataset(tiny_scene_spec, start=5)

        assert dataset.ids == ["000005", "000006", "000007"]
        assert len(dataset.vocab) == 10
        assert dataset.object_names[0] == "background"
        assert dataset.has_segmentation

    def test_empty_dataset(self, tiny_scene_spec):
        """Test zero images gives an empty dataset."""
        dataset = generate_dataset(tiny_scene_spec.model_copy(update={"num_images": 0}))

        assert len(dataset) == 0
        assert not dataset.has_segmentation


class TestSceneSample:
    """Tests for SceneSample validation."""

    def test_box_outside_image(self):
        """Test boxes must fit the image."""
        with pytest.raises(ValueError, match="outside"):
            SceneSample("000000", np.zeros((3, 8, 8)), (Box(0, 0, 9, 4, class_id=1),))

    def test_label_shape(self):
        """Test the label map must match the image."""
        with pytest.raises(ValueError, match="label map"):
            SceneSample("000000", np.zeros((3, 8, 8)), (), np.zeros((4, 4)))

    def test_ground_truth_arrays(self):
        """Test box and class arrays."""
        sample = SceneSample("000000", np.zeros((3, 8, 8)), (Box(1, 2, 5, 6, class_id=3),))

        assert sample.gt_array().tolist() == [[1.0, 2.0, 5.0, 6.0]]
        assert sample.gt_classes().tolist() == [3]
        assert sample.without_segmentation().seg_labels is None


class TestSummary:
    """Tests for dataset summaries."""

    def test_counts(self):
        """Test per-class and per-bin counts with strict ceilings."""
        boxes = (
            Box(0, 0, 4, 4, class_id=1),  # 16: small
            Box(0, 0, 8, 8, class_id=1),  # 64: medium (not < 64)
            Box(0, 0, 16, 16, class_id=2),  # 256: large
        )
        sample = SceneSample("000000", np.zeros((3, 16, 16)), boxes)

        summary = summarize([sample], ("background", "boat", "car"), 64.0, 256.0)

        assert summary.objects == 3
        assert summary.per_class == {"boat": 2, "car": 1}
        assert summary.per_size_bin == {"small": 1, "medium": 1, "large": 1}
        assert summary.small_fraction == pytest.approx(1 / 3)


class TestImageCodecs:
    """Tests for the PPM and PGM codecs."""

    def test_ppm_quantization(self):
        """Test decoded pixels are within half a grey level."""
        image = np.random.default_rng(0).random((3, 5, 7))

        decoded = decode_ppm(encode_ppm(image))

        assert decoded.shape == (3, 5, 7)
        assert np.abs(decoded - image).max() <= 0.5 / 255 + 1e-12

    def test_ppm_header(self):
        """Test the P6 header layout."""
        assert encode_ppm(np.zeros((3, 2, 4))).startswith(b"P6\n4 2\n255\n")

    def test_header_comment(self):
        """Test comment lines in the header are skipped."""
        payload = b"P5\n# made by hand\n2 1\n255\n\x01\x02"

        assert decode_pgm(payload).tolist() == [[1, 2]]

    def test_pgm_ignore_label(self):
        """Test the ignore label is stored as 255."""
        labels = np.array([[0, IGNORE_LABEL], [3, 9]])

        payload = encode_pgm(labels)

        assert payload.endswith(b"\x00\xff\x03\x09")
        assert decode_pgm(payload).tolist() == labels.tolist()

    def test_pgm_range(self):
        """Test labels that do not fit a byte are rejected."""
        with pytest.raises(ValueError):
            encode_pgm(np.array([[255]]))

    @pytest.mark.parametrize(
        ("payload", "match"),
        [
            (b"P3\n1 1\n255\n\x00\x00\x00", "P6 magic"),
            (b"P6\n1 x\n255\n", "malformed header"),
            (b"P6\n1 1\n65535\n\x00\x00\x00", "maxval"),
            (b"P6\n2 2\n255\n\x00\x00\x00", "expected 12 bytes"),
        ],
    )
    def test_ppm_errors(self, payload, match):
        """Test malformed files name the problem."""
        with pytest.raises(DatasetFormatError, match=match):
            decode_ppm(payload, "x.ppm")

    def test_error_names_file(self):
        """Test the source name prefixes the message."""
        with pytest.raises(DatasetFormatError, match="^bad.pgm: "):
            decode_pgm(b"P6\n1 1\n255\n\x00", "bad.pgm")


class TestBoxFiles:
    """Tests for annotation lines."""

    def test_format(self):
        """Test the class-then-corners layout."""
        assert format_box_line(Box(4.0, 4.0, 20.0, 20.5, class_id=3)) == "3 4.0 4.0 20.0 20.5"

    def test_parse(self):
        """Test blank lines are skipped."""
        boxes = parse_box_lines("1 0 0 4 4\n\n2 1.5 2 8 9\n")

        assert boxes == (Box(0, 0, 4, 4, class_id=1), Box(1.5, 2, 8, 9, class_id=2))

    @pytest.mark.parametrize(
        ("text", "match"),
        [
            ("1 0 0 4\n", "expected 5 fields"),
            ("a 0 0 4 4\n", "f.txt:1"),
            ("0 0 0 4 4\n", "invalid box"),
            ("1 0 0 4 4\n1 4 4 2 2\n", "f.txt:2"),
        ],
    )
    def test_parse_errors(self, text, match):
        """Test malformed lines name the file and line."""
        with pytest.raises(DatasetFormatError, match=match):
            parse_box_lines(text, "f.txt")


class TestDatasetFiles:
    """Tests for writing and reading dataset directories."""

    def test_roundtrip(self, tiny_dataset, tmp_path):
        """Test boxes and labels survive exactly and pixels within quantization."""
        write_dataset(tiny_dataset, tmp_path / "ds")

        loaded = read_dataset(tmp_path / "ds")

        assert loaded.ids == tiny_dataset.ids
        assert loaded.vocab.names == tiny_dataset.vocab.names
        assert loaded.object_names == tiny_dataset.object_names
        for a, b in zip(tiny_dataset, loaded):
            assert a.boxes == b.boxes
            assert np.array_equal(a.seg_labels, b.seg_labels)
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12

    def test_byte_identical(self, tiny_dataset, tmp_path):
        """Test writing the same samples twice gives identical files."""
        write_dataset(tiny_dataset, tmp_path / "a")
        write_dataset(tiny_dataset, tmp_path / "b")

        assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")

    def test_without_segmentation(self, tiny_dataset, tmp_path):
        """Test datasets can be written and read without label maps."""
        write_dataset(tiny_dataset, tmp_path / "ds", with_segmentation=False)

        loaded = read_dataset(tmp_path / "ds")

        assert not (tmp_path / "ds" / "seg").exists()
        assert not loaded.has_segmentation

    def test_skip_loading_segmentation(self, tiny_dataset, tmp_path):
        """Test label maps on disk can be ignored."""
        write_dataset(tiny_dataset, tmp_path / "ds")

        assert not read_dataset(tmp_path / "ds", load_segmentation=False).has_segmentation

    def test_missing_directory(self, tmp_path):
        """Test an absent directory is a file-not-found error."""
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "nope")

    def test_no_manifest_is_empty(self, tmp_path):
        """Test a directory without a manifest reads as empty."""
        assert len(read_dataset(tmp_path)) == 0

    def test_missing_listed_file(self, tiny_dataset, tmp_path):
        """Test a manifest entry without its image fails."""
        write_dataset(tiny_dataset, tmp_path / "ds")
        (tmp_path / "ds" / "images" / "000001.ppm").unlink()

        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path / "ds")

    def test_corrupt_box_file(self, tiny_dataset, tmp_path):
        """Test a bad annotation names its file."""
        write_dataset(tiny_dataset, tmp_path / "ds")
        (tmp_path / "ds" / "boxes" / "000002.txt").write_text("1 2 3\n", encoding="utf-8")

        with pytest.raises(DatasetFormatError, match="000002.txt:1"):
            read_dataset(tmp_path / "ds")

    def test_label_maps(self, tmp_path):
        """Test label-map directories round-trip."""
        maps = [np.array([[0, 1], [2, IGNORE_LABEL]]), np.zeros((2, 2), dtype=np.int64)]

        write_label_maps(maps, ["000000", "000001"], tmp_path / "maps")

        loaded = read_label_maps(tmp_path / "maps", ["000000", "000001"])
        assert [m.tolist() for m in loaded] == [m.tolist() for m in maps]

    def test_label_map_count(self, tmp_path):
        """Test one id per map."""
        with pytest.raises(ValueError):
            write_label_maps([np.zeros((2, 2))], [], tmp_path)

    def test_dataset_sequence(self, tiny_dataset):
        """Test SceneDataset behaves like a sequence."""
        assert len(tiny_dataset[1:]) == 2
        assert isinstance(SceneDataset(list(tiny_dataset)), SceneDataset)
        assert [s.sample_id for s in tiny_dataset] == tiny_dataset.ids
