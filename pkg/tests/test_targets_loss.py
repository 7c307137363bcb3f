import math

import numpy as np
import pytest

import oracles
from box_geometry import bev_iou_matrix
from config import build_config
from errors import InvariantError, ShapeError
from nn_kernels import functional as F
from nn_kernels.grad_check import grad_check
from targets_loss import (DONT_CARE, NEGATIVE, POSITIVE, TrainTargets, build_targets, decode_residual,
                          decode_residuals, encode_residual, encode_residuals, flatten_regression, flatten_scores,
                          make_anchor_grid, match_anchors, total_loss, unflatten_regression, unflatten_scores)


def _random_boxes(rng, n, angles=None):
    xyz = rng.uniform(-40, 40, (n, 3))
    dims = rng.uniform(0.3, 5.0, (n, 3))
    theta = rng.uniform(-math.pi, math.pi, n) if angles is None else rng.choice(angles, n)
    return np.column_stack([xyz, dims, theta])


def test_anchor_grid_layout():
    config = build_config("car")
    grid = make_anchor_grid(config.target, (200, 176), config.voxel.range)
    assert grid.num_anchors == 200 * 176 * 2
    assert grid.stride == pytest.approx((0.4, 0.4))
    # (h, w, a) 顺序：相邻两个锚框位置相同、旋转不同
    first = grid.boxes[:2]
    assert first[0, :2].tolist() == pytest.approx([0.2, -39.8])
    assert first[:, 6].tolist() == pytest.approx([0.0, math.pi / 2])
    assert grid.boxes[2, 0] == pytest.approx(0.6)
    assert grid.boxes[176 * 2, 1] == pytest.approx(-39.4)
    assert np.all(grid.boxes[:, 2] == -1.0)
    assert grid.diagonal[0] == pytest.approx(math.hypot(3.9, 1.6))


def test_residual_roundtrip(rng):
    anchors = _random_boxes(rng, 10_000, angles=[0.0, math.pi / 2])
    gts = _random_boxes(rng, 10_000)
    back = decode_residuals(encode_residuals(gts, anchors), anchors)
    assert np.abs(back - gts).max() <= 1e-9


def test_single_residual_matches_scalar_decode():
    anchor = [10.0, 2.0, -1.0, 3.9, 1.6, 1.56, math.pi / 2]
    u = [0.1, -0.2, 0.3, 0.05, -0.1, 0.2, 3.5]
    box = decode_residual(u, anchor)
    assert tuple(box) == pytest.approx(oracles.scalar_decode(u, anchor))
    assert -math.pi <= box.theta < math.pi
    assert encode_residual(tuple(box), anchor)[:6].tolist() == pytest.approx(u[:6])


def test_nonpositive_gt_dimension_rejected():
    with pytest.raises(InvariantError):
        encode_residuals([[0, 0, 0, 0.0, 1, 1, 0]], [[0, 0, 0, 1, 1, 1, 0]])


def _check_matching_against_exhaustive(rng, profile, scenes):
    target = build_config(profile).target
    grid = make_anchor_grid(target, (16, 16), (-3.0, 1.0, -6.4, 6.4, 0.0, 12.8))
    for _ in range(scenes):
        count = int(rng.integers(1, 6))
        gts = np.column_stack([rng.uniform(0.5, 12.3, count), rng.uniform(-6, 6, count),
                               np.full(count, target.anchor_z),
                               np.asarray(target.anchor_size) * rng.uniform(0.8, 1.2, (count, 3)),
                               rng.uniform(-math.pi, math.pi, count)])
        match = match_anchors(grid, gts, target)
        iou = bev_iou_matrix(grid.boxes, gts)
        labels, gt_index = oracles.exhaustive_match(iou, target.pos_iou, target.neg_iou)
        assert np.array_equal(match.labels, labels)
        assert np.array_equal(match.gt_index, gt_index)
        # 每个有重叠的真值框至少有一个正样本
        for g in range(count):
            if g not in match.unmatched_gts:
                assert match.labels[np.argmax(iou[:, g])] == POSITIVE


@pytest.mark.parametrize("profile", ["car", "pedestrian"])
def test_matching_matches_exhaustive(rng, profile):
    _check_matching_against_exhaustive(rng, profile, scenes=10)


@pytest.mark.slow
@pytest.mark.parametrize("profile", ["car", "pedestrian"])
def test_matching_matches_exhaustive_many_scenes(rng, profile):
    _check_matching_against_exhaustive(rng, profile, scenes=100)


def test_match_thresholds_example():
    config = build_config("car")
    grid = make_anchor_grid(config.target, (4, 4), (-3.0, 1.0, -3.2, 3.2, 0.0, 6.4))
    gt = grid.boxes[5].copy()
    match = match_anchors(grid, gt[None], config.target)
    assert match.labels[5] == POSITIVE
    assert match.gt_index[5] == 0
    assert match.targets[5] == pytest.approx(np.zeros(7))
    assert match.labels[4] == NEGATIVE
    assert set(np.unique(match.labels)) <= {POSITIVE, NEGATIVE, DONT_CARE}


def test_no_gts_gives_all_negatives():
    config = build_config("car")
    grid = make_anchor_grid(config.target, (4, 4))
    match = match_anchors(grid, np.zeros((0, 7)), config.target)
    assert match.num_pos == 0
    assert match.num_neg == grid.num_anchors


def test_far_gt_is_reported_unmatched():
    config = build_config("car")
    grid = make_anchor_grid(config.target, (4, 4), (-3.0, 1.0, -3.2, 3.2, 0.0, 6.4))
    match = match_anchors(grid, [[100.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0]], config.target)
    assert match.unmatched_gts == [0]
    assert match.num_pos == 0


def test_weak_overlap_gt_is_still_forced_positive():
    config = build_config("car")
    grid = make_anchor_grid(config.target, (4, 4), (-3.0, 1.0, -3.2, 3.2, 0.0, 6.4))
    center = grid.boxes[5]
    gt = np.array([[center[0], center[1], center[2], 0.2, 0.2, 0.2, 0.0]])
    match = match_anchors(grid, gt, config.target)
    iou = bev_iou_matrix(grid.boxes, gt)[:, 0]
    best = int(np.argmax(iou))
    assert 0.0 < iou[best] < config.target.neg_iou
    assert match.unmatched_gts == []
    assert match.num_pos == 1
    assert match.labels[best] == POSITIVE
    labels, _ = oracles.exhaustive_match(iou[:, None], config.target.pos_iou, config.target.neg_iou)
    assert np.array_equal(match.labels, labels)


def test_score_and_regression_layout(rng):
    scores = rng.normal(size=(2, 2, 3, 4))
    flat = flatten_scores(scores)
    # 锚框 (h=1, w=2, a=1) 的展平下标为 (1·4 + 2)·2 + 1
    assert flat[1, (1 * 4 + 2) * 2 + 1] == scores[1, 1, 1, 2]
    assert np.array_equal(unflatten_scores(flat, scores.shape), scores)

    reg = rng.normal(size=(2, 14, 3, 4))
    flat_reg = flatten_regression(reg)
    assert flat_reg.shape == (2, 24, 7)
    assert flat_reg[0, (2 * 4 + 3) * 2 + 1, 4] == reg[0, 1 * 7 + 4, 2, 3]
    assert np.array_equal(unflatten_regression(flat_reg, reg.shape), reg)

    pairs = rng.normal(size=(1, 4, 3, 4))
    flat_pairs = flatten_scores(pairs, "softmax2")
    assert flat_pairs[0, (0 * 4 + 1) * 2 + 1].tolist() == [pairs[0, 2, 0, 1], pairs[0, 3, 0, 1]]
    assert np.array_equal(unflatten_scores(flat_pairs, pairs.shape, "softmax2"), pairs)


def test_loss_matches_termwise_sum(rng):
    for _ in range(50):
        b, a, h, w = int(rng.integers(1, 3)), 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))
        logits = rng.normal(size=(b, a, h, w)) * 3
        reg = rng.normal(size=(b, 7 * a, h, w))
        labels = rng.choice([DONT_CARE, NEGATIVE, POSITIVE], size=(b, h * w * a)).astype(np.int8)
        labels[:, 0] = POSITIVE
        targets = TrainTargets(labels, rng.normal(size=(b, h * w * a, 7)))
        result = total_loss(logits, reg, targets, alpha=1.5, beta=1.0)
        expected = oracles.termwise_loss(F.sigmoid(flatten_scores(logits)).reshape(-1), labels.reshape(-1),
                                         flatten_regression(reg).reshape(-1, 7),
                                         targets.reg_targets.reshape(-1, 7), 1.5, 1.0)
        assert abs(result.total - expected) <= 1e-6 * max(1.0, abs(expected))
        assert result.components()["loss"] == result.total


def test_loss_without_negatives_drops_negative_term(rng):
    logits = rng.normal(size=(1, 2, 1, 1))
    targets = TrainTargets(np.array([[POSITIVE, DONT_CARE]], dtype=np.int8), np.zeros((1, 2, 7)))
    result = total_loss(logits, np.zeros((1, 14, 1, 1)), targets)
    assert result.cls_neg == 0.0
    assert result.num_neg == 0


def test_loss_requires_a_positive(rng):
    targets = TrainTargets(np.zeros((1, 4), dtype=np.int8), np.zeros((1, 4, 7)))
    with pytest.raises(InvariantError):
        total_loss(rng.normal(size=(1, 2, 1, 2)), rng.normal(size=(1, 14, 1, 2)), targets)


def test_frames_without_positives_are_skipped(rng):
    logits = rng.normal(size=(2, 2, 1, 2))
    reg = rng.normal(size=(2, 14, 1, 2))
    labels = np.array([[POSITIVE, NEGATIVE, NEGATIVE, NEGATIVE], [NEGATIVE] * 4], dtype=np.int8)
    targets = TrainTargets(labels, np.zeros((2, 4, 7)))
    result = total_loss(logits, reg, targets)
    assert result.skipped_frames == 1
    assert result.num_neg == 3
    assert not result.grad_score[1].any()
    assert not result.grad_reg[1].any()


def test_loss_shape_mismatch(rng):
    targets = TrainTargets(np.ones((1, 3), dtype=np.int8), np.zeros((1, 3, 7)))
    with pytest.raises(ShapeError):
        total_loss(rng.normal(size=(1, 2, 1, 2)), rng.normal(size=(1, 14, 1, 2)), targets)


@pytest.mark.parametrize("head", ["sigmoid", "softmax2"])
def test_loss_gradients(rng, head):
    channels = 2 if head == "sigmoid" else 4
    logits = rng.normal(size=(2, channels, 2, 3))
    reg = rng.normal(size=(2, 14, 2, 3))
    labels = rng.choice([DONT_CARE, NEGATIVE, POSITIVE], size=(2, 12)).astype(np.int8)
    labels[:, 0] = POSITIVE
    reg_targets = flatten_regression(reg) + rng.choice([-2.0, 0.3], size=(2, 12, 7))
    targets = TrainTargets(labels, reg_targets)
    result = total_loss(logits, reg, targets, head=head, alpha=1.5, beta=1.0)

    def op():
        return total_loss(logits, reg, targets, head=head, alpha=1.5, beta=1.0).total

    report = grad_check(op, [logits, reg], [result.grad_score, result.grad_reg])
    assert report.passed, report.summary()


def test_softmax_head_loss_matches_probabilities(rng):
    logits = rng.normal(size=(1, 4, 1, 2))
    labels = np.array([[POSITIVE, NEGATIVE, NEGATIVE, DONT_CARE]], dtype=np.int8)
    targets = TrainTargets(labels, np.zeros((1, 4, 7)))
    result = total_loss(logits, np.zeros((1, 14, 1, 2)), targets, head="softmax2", alpha=1.0, beta=1.0)
    probs = F.softmax2(flatten_scores(logits, "softmax2"), axis=-1)[0, :, 1]
    expected = -math.log(probs[0]) - (math.log(1 - probs[1]) + math.log(1 - probs[2])) / 2
    assert result.cls_pos + result.cls_neg == pytest.approx(expected)


def test_build_targets_stacks_frames():
    config = build_config("car")
    grid = make_anchor_grid(config.target, (4, 4), (-3.0, 1.0, -3.2, 3.2, 0.0, 6.4))
    matches = [match_anchors(grid, grid.boxes[i:i + 1], config.target) for i in (0, 7)]
    targets = build_targets(matches)
    assert targets.labels.shape == (2, grid.num_anchors)
    assert targets.reg_targets.shape == (2, grid.num_anchors, 7)
    assert targets.frame_num_pos().tolist() == [m.num_pos for m in matches]
