"""Unit tests for boxgeom module."""

import math

import numpy as np
import pytest

from stuffnet.boxgeom import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorGrid,
    Box,
    RegressionTarget,
    assign_rpn_labels,
    clip_and_filter_proposals,
    decode,
    decode_boxes,
    encode,
    encode_boxes,
    generate_anchors,
    generate_proposals,
    iou,
    iou_matrix,
    label_anchors,
    nms,
    sample_head_minibatch,
    subsample_labels,
)
from stuffnet.errors import DegenerateBatchError


def greedy_nms_oracle(boxes, scores, threshold):
    """Keep a box when it overlaps no already-kept box above the threshold."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        a = Box.from_array(boxes[i])
        if all(iou(a, Box.from_array(boxes[j])) <= threshold for j in kept):
            kept.append(i)
    return kept


def random_boxes(rng, n, size=64.0, min_side=2.0, max_side=24.0):
    xy = rng.uniform(0.0, size - max_side, size=(n, 2))
    wh = rng.uniform(min_side, max_side, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


class TestBox:
    """Tests for Box."""

    def test_geometry(self):
        """Test width, height and area without +1 correction."""
        box = Box(2, 3, 10, 7)

        assert (box.width, box.height, box.area) == (8.0, 4.0, 32.0)
        assert box.is_valid

    def test_degenerate(self):
        """Test zero width is not valid."""
        assert not Box(5, 0, 5, 10).is_valid

    def test_with_ignore(self):
        """Test the ignore copy keeps coordinates."""
        box = Box(0, 0, 4, 4, class_id=2).with_ignore()

        assert box.ignore
        assert box.class_id == 2
        assert box.coords() == (0.0, 0.0, 4.0, 4.0)


class TestIoU:
    """Tests for iou and iou_matrix."""

    def test_reference_pair(self):
        """Test two offset 10x10 boxes give 1/7."""
        assert math.isclose(iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)), 1.0 / 7.0)

    def test_identical(self):
        """Test a box overlaps itself fully."""
        assert iou(Box(1, 2, 3, 4), Box(1, 2, 3, 4)) == 1.0

    def test_disjoint_and_touching(self):
        """Test no shared area gives 0."""
        assert iou(Box(0, 0, 5, 5), Box(10, 10, 12, 12)) == 0.0
        assert iou(Box(0, 0, 5, 5), Box(5, 0, 10, 5)) == 0.0

    def test_symmetric_and_bounded(self):
        """Test symmetry and the [0, 1] range on random pairs."""
        rng = np.random.default_rng(0)
        a = random_boxes(rng, 30)
        b = random_boxes(rng, 30)
        for ra, rb in zip(a, b):
            v = iou(Box.from_array(ra), Box.from_array(rb))
            assert 0.0 <= v <= 1.0
            assert v == iou(Box.from_array(rb), Box.from_array(ra))

    def test_degenerate_box(self):
        """Test a degenerate box is an invalid argument."""
        with pytest.raises(ValueError, match="degenerate"):
            iou(Box(0, 0, 0, 5), Box(0, 0, 5, 5))

    def test_matrix_matches_pairwise(self):
        """Test the matrix form against pairwise calls."""
        rng = np.random.default_rng(1)
        a = random_boxes(rng, 5)
        b = random_boxes(rng, 4)

        matrix = iou_matrix(a, b)

        assert matrix.shape == (5, 4)
        for i in range(5):
            for j in range(4):
                assert math.isclose(
                    matrix[i, j],
                    iou(Box.from_array(a[i]), Box.from_array(b[j])),
                    abs_tol=1e-12,
                )


class TestAnchors:
    """Tests for anchor generation."""

    def test_count(self):
        """Test 4x5 cells with 3 scales and 3 ratios give 180 anchors."""
        anchors = generate_anchors(AnchorGrid(16.0), 4, 5)

        assert anchors.shape == (180, 4)

    def test_single_anchor(self):
        """Test one cell, scale 8, ratio 1 at stride 8."""
        anchors = generate_anchors(AnchorGrid(8.0, (8.0,), (1.0,)), 1, 1)

        assert anchors.tolist() == [[0.0, 0.0, 8.0, 8.0]]

    def test_area_fixed_per_scale(self):
        """Test every ratio of scale 16 covers 256 pixels."""
        sizes = AnchorGrid(16.0, (16.0,), (0.5, 1.0, 2.0)).base_sizes()

        assert np.allclose(sizes[:, 0] * sizes[:, 1], 256.0)
        assert np.allclose(sizes[:, 1] / sizes[:, 0], [0.5, 1.0, 2.0])

    def test_centres_follow_stride(self):
        """Test cells are row-major with centres at (i + 0.5) * stride."""
        anchors = generate_anchors(AnchorGrid(8.0, (4.0,), (1.0,)), 2, 3)
        centres = (anchors[:, :2] + anchors[:, 2:]) / 2.0

        assert centres.tolist() == [
            [4.0, 4.0], [12.0, 4.0], [20.0, 4.0],
            [4.0, 12.0], [12.0, 12.0], [20.0, 12.0],
        ]  # fmt: skip

    def test_invalid_grid(self):
        """Test stride and the scale/ratio lists are validated."""
        with pytest.raises(ValueError, match="stride"):
            AnchorGrid(0.0)
        with pytest.raises(ValueError, match="at least one"):
            AnchorGrid(8.0, (), (1.0,))


class TestRegression:
    """Tests for box encoding and decoding."""

    def test_reference_encoding(self):
        """Test the shifted, enlarged example."""
        t = encode(Box(0, 0, 10, 10), Box(2, 2, 14, 14))

        assert math.isclose(t.tx, 0.3)
        assert math.isclose(t.ty, 0.3)
        assert math.isclose(t.tw, math.log(1.2))
        assert math.isclose(t.th, math.log(1.2))

    def test_decode_inverts_encode(self):
        """Test decode(anchor, encode(anchor, gt)) recovers gt."""
        rng = np.random.default_rng(2)
        anchors = random_boxes(rng, 50)
        gts = random_boxes(rng, 50)

        recovered = decode_boxes(anchors, encode_boxes(anchors, gts))

        assert np.allclose(recovered, gts, atol=1e-9)

    def test_zero_delta_is_identity(self):
        """Test zero offsets return the anchor."""
        box = decode(Box(1, 2, 5, 10), RegressionTarget(0.0, 0.0, 0.0, 0.0))

        assert box.coords() == pytest.approx((1.0, 2.0, 5.0, 10.0))

    def test_log_size_clamped(self):
        """Test huge size deltas cannot overflow."""
        out = decode_boxes(np.array([[0.0, 0.0, 16.0, 16.0]]), np.array([[0.0, 0.0, 1e4, 1e4]]))

        assert np.all(np.isfinite(out))
        assert math.isclose(out[0, 2] - out[0, 0], 1000.0)

    def test_degenerate_inputs(self):
        """Test zero-size boxes are rejected."""
        with pytest.raises(ValueError):
            encode(Box(0, 0, 0, 10), Box(0, 0, 5, 5))
        with pytest.raises(ValueError):
            encode_boxes(np.array([[0.0, 0.0, 4.0, 4.0]]), np.array([[1.0, 1.0, 1.0, 3.0]]))


class TestNMS:
    """Tests for greedy non-maximum suppression."""

    def test_suppresses_overlap(self):
        """Test a heavily overlapping lower-scored box is dropped."""
        boxes = np.array([[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]], dtype=float)

        keep = nms(boxes, [0.9, 0.8, 0.7], iou_threshold=0.5)

        assert keep.tolist() == [0, 2]

    def test_threshold_is_strict(self):
        """Test IoU exactly at the threshold is kept."""
        boxes = np.array([[0, 0, 10, 10], [5, 5, 15, 15]], dtype=float)

        assert nms(boxes, [1.0, 0.5], iou_threshold=25.0 / 175.0).tolist() == [0, 1]

    def test_ties_keep_lower_index(self):
        """Test equal scores prefer the earlier box."""
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)

        assert nms(boxes, [0.5, 0.5]).tolist() == [0]

    def test_scored_boxes(self):
        """Test Box input takes scores from the boxes."""
        boxes = [Box(0, 0, 10, 10, score=0.2), Box(0, 0, 10, 9, score=0.9)]

        assert nms(boxes, iou_threshold=0.5).tolist() == [1]

    def test_max_keep(self):
        """Test the output stops at max_keep."""
        boxes = random_boxes(np.random.default_rng(3), 20, size=200.0, max_side=5.0)

        assert len(nms(boxes, np.arange(20.0), max_keep=3)) == 3
        assert nms(boxes, np.arange(20.0), max_keep=0).tolist() == []

    def test_empty(self):
        """Test no boxes gives no indices."""
        assert nms(np.zeros((0, 4)), np.zeros(0)).tolist() == []

    def test_missing_scores(self):
        """Test arrays need explicit scores."""
        with pytest.raises(ValueError, match="scores"):
            nms(np.ones((2, 4)))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_oracle(self, seed):
        """Test random sets against the greedy oracle."""
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 40)
        scores = rng.random(40)

        keep = nms(boxes, scores, iou_threshold=0.5)

        assert keep.tolist() == greedy_nms_oracle(boxes, scores.tolist(), 0.5)

    @pytest.mark.parametrize("seed", range(5))
    def test_survivors_do_not_overlap(self, seed):
        """Test kept boxes pairwise overlap at most the threshold."""
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 60)

        kept = boxes[nms(boxes, rng.random(60), iou_threshold=0.3)]

        overlaps = iou_matrix(kept, kept)
        np.fill_diagonal(overlaps, 0.0)
        assert overlaps.max() <= 0.3


class TestProposals:
    """Tests for clipping and proposal generation."""

    def test_clip_reference(self):
        """Test a box sticking out of the top-left corner."""
        out = clip_and_filter_proposals(np.array([[-5.0, -5.0, 3.0, 3.0]]), 10, 10, 1.0)

        assert out.tolist() == [[0.0, 0.0, 3.0, 3.0]]

    def test_small_boxes_dropped(self):
        """Test boxes below min_size on either side are removed."""
        boxes = np.array([[0, 0, 1.5, 8], [0, 0, 8, 8], [20, 20, 30, 30]], dtype=float)

        out, index = clip_and_filter_proposals(boxes, 16, 16, 2.0, return_index=True)

        assert index.tolist() == [1]
        assert out.tolist() == [[0.0, 0.0, 8.0, 8.0]]

    def test_generate_sorted_and_bounded(self):
        """Test proposals are in-image, sorted and capped."""
        rng = np.random.default_rng(4)
        anchors = generate_anchors(AnchorGrid(8.0, (8.0, 16.0), (1.0,)), 4, 4)
        objectness = rng.random(anchors.shape[0])
        deltas = rng.normal(scale=0.1, size=anchors.shape)

        boxes, scores = generate_proposals(
            anchors, objectness, deltas, 32, 32, pre_nms_top=20, post_nms_top=5, min_size=1.0
        )

        assert 1 <= boxes.shape[0] <= 5
        assert np.all(np.diff(scores) <= 0)
        assert boxes.min() >= 0.0
        assert boxes.max() <= 32.0


class TestRPNAssignment:
    """Tests for anchor labelling and subsampling."""

    def test_reference_labels(self):
        """Test positive, negative, ignored and crossing anchors."""
        anchors = np.array(
            [
                [0, 0, 16, 16],  # exact match
                [16, 16, 32, 32],  # no overlap
                [-4, 0, 12, 16],  # crosses the border
                [4, 0, 20, 16],  # IoU 0.6
            ],
            dtype=float,
        )

        labels, matched = label_anchors(anchors, np.array([[0, 0, 16, 16]], dtype=float), 32, 32)

        assert labels.tolist() == [POSITIVE, NEGATIVE, IGNORE, IGNORE]
        assert matched.tolist() == [0, 0, 0, 0]

    def test_best_anchor_is_positive(self):
        """Test the best anchor of a box is positive below the high threshold."""
        anchors = np.array([[0, 0, 16, 16], [16, 16, 32, 32]], dtype=float)

        labels, _ = label_anchors(anchors, np.array([[0, 0, 10, 10]], dtype=float), 32, 32)

        assert labels.tolist() == [POSITIVE, NEGATIVE]

    def test_no_ground_truth(self):
        """Test every inside anchor is negative without boxes."""
        anchors = np.array([[0, 0, 8, 8], [-1, 0, 8, 8]], dtype=float)

        labels, _ = label_anchors(anchors, np.zeros((0, 4)), 16, 16)

        assert labels.tolist() == [NEGATIVE, IGNORE]

    def test_threshold_order(self):
        """Test lo must be below hi."""
        with pytest.raises(ValueError, match="thresholds"):
            label_anchors(np.zeros((1, 4)), np.zeros((0, 4)), 8, 8, hi=0.3, lo=0.7)

    def test_subsample_caps(self):
        """Test positives capped at half the batch and negatives fill the rest."""
        labels = np.array([POSITIVE] * 10 + [NEGATIVE] * 20)

        out = subsample_labels(labels, batch=8, pos_fraction=0.5, seed=0)

        assert (out == POSITIVE).sum() == 4
        assert (out == NEGATIVE).sum() == 4
        assert set(np.flatnonzero(out == POSITIVE)) <= set(range(10))

    def test_subsample_fills_with_negatives(self):
        """Test few positives leave room for more negatives."""
        labels = np.array([POSITIVE] * 2 + [NEGATIVE] * 20)

        out = subsample_labels(labels, batch=8, pos_fraction=0.5, seed=0)

        assert (out == POSITIVE).sum() == 2
        assert (out == NEGATIVE).sum() == 6

    def test_subsample_deterministic(self):
        """Test one seed picks one subset."""
        labels = np.array([POSITIVE] * 10 + [NEGATIVE] * 20)

        first = subsample_labels(labels, batch=8, seed=3)
        second = subsample_labels(labels, batch=8, seed=3)

        assert np.array_equal(first, second)

    def test_assignment_targets(self):
        """Test positives carry regression targets and the rest stay zero."""
        anchors = generate_anchors(AnchorGrid(8.0, (8.0, 16.0), (1.0,)), 4, 4)
        gts = np.array([[4.0, 4.0, 20.0, 18.0]])

        result = assign_rpn_labels(anchors, gts, (32, 32), batch=16, seed=0)

        assert result.num_positive >= 1
        assert result.num_sampled <= 16
        pos = np.flatnonzero(result.labels == POSITIVE)
        assert np.allclose(result.targets[pos], encode_boxes(anchors[pos], gts[[0] * pos.size]))
        rest = np.flatnonzero(result.labels != POSITIVE)
        assert np.array_equal(result.targets[rest], np.zeros((rest.size, 4)))


class TestHeadMinibatch:
    """Tests for detection-head region sampling."""

    def test_reference_sampling(self):
        """Test foreground, background and dropped candidates."""
        gts = np.array([[0, 0, 10, 10]], dtype=float)
        proposals = np.array(
            [
                [0, 0, 10, 10],  # IoU 1
                [0, 0, 10, 6],  # IoU 0.6
                [5, 0, 15, 10],  # IoU 1/3
                [40, 40, 50, 50],  # IoU 0
            ],
            dtype=float,
        )

        batch = sample_head_minibatch(proposals, gts, [3], batch=8, fg_fraction=0.5)

        assert batch.source_index.tolist() == [0, 1, 2]
        assert batch.labels.tolist() == [3, 3, 0]
        assert batch.num_foreground == 2
        assert np.allclose(batch.targets[2], 0.0)
        assert np.allclose(batch.targets[0], 0.0)
        assert len(batch) == 3

    def test_foreground_capped(self):
        """Test at most fg_fraction * batch foreground regions."""
        gts = np.array([[0, 0, 10, 10]], dtype=float)
        proposals = np.tile(gts, (10, 1))
        proposals = np.concatenate([proposals, [[5, 0, 15, 10]] * 10])

        batch = sample_head_minibatch(proposals, gts, [1], batch=8, fg_fraction=0.25, seed=0)

        assert batch.num_foreground == 2
        assert len(batch) == 8

    def test_ground_truth_included(self):
        """Test include_gt adds the boxes as foreground candidates."""
        gts = np.array([[0, 0, 10, 10]], dtype=float)

        batch = sample_head_minibatch(
            np.array([[6, 0, 16, 10]], dtype=float), gts, [2], batch=4, include_gt=True
        )

        assert batch.labels.tolist() == [2, 0]
        assert batch.source_index.tolist() == [1, 0]

    def test_degenerate_batch(self):
        """Test no candidates in either pool is a degenerate batch."""
        with pytest.raises(DegenerateBatchError):
            sample_head_minibatch(
                np.array([[40, 40, 50, 50]], dtype=float),
                np.array([[0, 0, 10, 10]], dtype=float),
                [1],
            )

    def test_threshold_order(self):
        """Test background range must be ordered."""
        with pytest.raises(ValueError, match="thresholds"):
            sample_head_minibatch(np.zeros((1, 4)), np.zeros((0, 4)), [], bg_range=(0.5, 0.1))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        """Test sampled regions against a brute-force pool classification."""
        rng = np.random.default_rng(seed)
        gts = random_boxes(rng, 3)
        classes = [1, 2, 3]
        proposals = np.concatenate([gts + rng.normal(scale=1.5, size=gts.shape)] * 4)
        proposals = np.concatenate([proposals, random_boxes(rng, 40)])
        proposals[:, 2:] = np.maximum(proposals[:, 2:], proposals[:, :2] + 1.0)

        batch = sample_head_minibatch(proposals, gts, classes, batch=16, fg_fraction=0.25, seed=0)

        fg_pool, bg_pool = [], []
        for i, row in enumerate(proposals):
            overlaps = [iou(Box.from_array(row), Box.from_array(g)) for g in gts]
            best = max(overlaps)
            if best >= 0.5:
                fg_pool.append((i, classes[int(np.argmax(overlaps))]))
            elif 0.1 <= best < 0.5:
                bg_pool.append(i)
        n_fg = min(4, len(fg_pool))
        n_bg = min(16 - n_fg, len(bg_pool))

        assert batch.num_foreground == n_fg
        assert len(batch) == n_fg + n_bg
        fg_labels = dict(fg_pool)
        for idx, label in zip(batch.source_index[:n_fg], batch.labels[:n_fg]):
            assert fg_labels[int(idx)] == label
        assert set(batch.source_index[n_fg:].tolist()) <= set(bg_pool)
        assert np.all(batch.labels[n_fg:] == 0)
