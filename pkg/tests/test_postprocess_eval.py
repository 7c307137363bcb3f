import math

import numpy as np
import pytest

import oracles
from box_geometry import BOX_EDGES, Box3D, bev_iou
from config import build_config
from io_kitti import LabelRecord, LabelSet
from postprocess_eval import (ALL_DIFFICULTY, Detection, EvalConfig, average_precision, decode_detections,
                              export_ply, interpolated_ap, labels_from_boxes, nms_bev, precision_recall)
from targets_loss import make_anchor_grid


def _box(x, y=0.0, theta=0.0):
    return Box3D(x, y, -1.0, 3.9, 1.6, 1.56, theta)


def _five_frames():
    gts = [labels_from_boxes([_box(10.0)]), labels_from_boxes([_box(20.0)]), labels_from_boxes([_box(30.0)]),
           labels_from_boxes([_box(40.0)]), labels_from_boxes(np.zeros((0, 7)))]
    dets = [
        [Detection(_box(10.0), 0.9)],
        [Detection(_box(25.0, 10.0), 0.8)],
        [Detection(_box(30.0), 0.7)],
        [],
        [Detection(_box(50.0), 0.6)],
    ]
    return dets, gts


def test_eleven_point_ap_by_hand():
    dets, gts = _five_frames()
    report = average_precision(dets, gts, EvalConfig(), difficulties=[ALL_DIFFICULTY])
    # 排序后 TP, FP, TP, FP，共 4 个真值
    recall, precision = report.curves[ALL_DIFFICULTY]
    assert recall.tolist() == pytest.approx([0.25, 0.25, 0.5, 0.5])
    assert precision.tolist() == pytest.approx([1.0, 0.5, 2.0 / 3.0, 0.5])
    assert report.ap[ALL_DIFFICULTY] == pytest.approx(5.0 / 11.0)
    assert report.num_gt[ALL_DIFFICULTY] == 4


def test_forty_point_ap_by_hand():
    dets, gts = _five_frames()
    report = average_precision(dets, gts, EvalConfig(interpolation=40), difficulties=[ALL_DIFFICULTY])
    assert report.ap[ALL_DIFFICULTY] == pytest.approx(5.0 / 12.0)


def test_perfect_detections_score_one(rng):
    frames = [np.column_stack([rng.uniform(5, 60, 3) + 20 * np.arange(3), rng.uniform(-20, 20, 3), np.full(3, -1.0),
                               np.tile([3.9, 1.6, 1.56], (3, 1)), rng.uniform(-math.pi, math.pi, 3)])
              for _ in range(4)]
    gts = [labels_from_boxes(f) for f in frames]
    dets = [[Detection(Box3D(*b), float(s)) for b, s in zip(f, rng.uniform(0.5, 1.0, 3))] for f in frames]
    for mode in ("bev", "3d"):
        report = average_precision(dets, gts, EvalConfig(mode=mode), difficulties=[ALL_DIFFICULTY])
        assert report.ap[ALL_DIFFICULTY] == pytest.approx(1.0)


def test_duplicate_detection_is_false_positive():
    gts = [labels_from_boxes([_box(10.0)])]
    dets = [[Detection(_box(10.0), 0.9), Detection(_box(10.05), 0.8)]]
    report = average_precision(dets, gts, EvalConfig(), difficulties=[ALL_DIFFICULTY])
    recall, precision = report.curves[ALL_DIFFICULTY]
    assert precision.tolist() == pytest.approx([1.0, 0.5])


def test_difficulty_filter_and_dont_care():
    record = LabelRecord(cls="Car", box=_box(10.0), truncation=0.0, occlusion=0, bbox2d=(0.0, 100.0, 50.0, 130.0))
    dont_care = LabelRecord(cls="DontCare", box=_box(30.0))
    labels = LabelSet(boxes=[record.box], classes=["Car"], records=[record], dont_care=[dont_care])
    dets = [[Detection(_box(10.0), 0.9), Detection(_box(30.0), 0.8)]]
    report = average_precision(dets, [labels], EvalConfig())
    # 30 像素高：easy 中被忽略，moderate/hard 中有效
    assert report.num_gt == {"easy": 0, "moderate": 1, "hard": 1}
    assert report.ap["easy"] == 0.0
    assert report.ap["moderate"] == pytest.approx(1.0)
    assert report.curves["moderate"][1].tolist() == pytest.approx([1.0])


def test_other_class_detections_are_ignored():
    gts = [labels_from_boxes([_box(10.0)])]
    dets = [[Detection(_box(10.0), 0.9), Detection(_box(50.0), 0.95, cls="Pedestrian")]]
    report = average_precision(dets, gts, EvalConfig(), difficulties=[ALL_DIFFICULTY])
    assert report.ap[ALL_DIFFICULTY] == pytest.approx(1.0)


def test_tied_scores_do_not_depend_on_order():
    matches = [(0.5, True), (0.5, False), (0.9, True)]
    recall, precision = precision_recall(matches, 3)
    assert recall.tolist() == pytest.approx([1 / 3, 2 / 3])
    assert precision.tolist() == pytest.approx([1.0, 2 / 3])
    assert precision_recall(list(reversed(matches)), 3)[1].tolist() == pytest.approx(precision.tolist())


def test_eval_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=0.0)
    with pytest.raises(ValueError):
        EvalConfig(interpolation=20)
    with pytest.raises(ValueError):
        interpolated_ap(np.zeros(1), np.zeros(1), points=7)


def test_nms_matches_naive(rng):
    for _ in range(5):
        n = 40
        boxes = np.column_stack([rng.uniform(0, 12, (n, 2)), np.zeros(n), np.tile([3.9, 1.6, 1.56], (n, 1)),
                                 rng.uniform(-math.pi, math.pi, n)])
        scores = rng.uniform(0, 1, n)
        scores[5] = scores[6]
        dets = [Detection(Box3D(*b), float(s)) for b, s in zip(boxes, scores)]
        kept = nms_bev(dets, 0.1)
        expected = oracles.naive_nms(boxes, scores, bev_iou, 0.1)
        assert [dets.index(d) for d in kept] == expected
        # 保留的框两两 IoU 不超过阈值
        for i, a in enumerate(kept):
            for b in kept[i + 1:]:
                assert bev_iou(a.box, b.box) <= 0.1


def test_decode_detections_thresholds_and_decodes():
    config = build_config("reduced")
    grid = make_anchor_grid(config.target, (2, 3), config.voxel.range)
    logits = np.full((2, 2, 3), -5.0)
    logits[1, 0, 2] = 3.0
    reg = np.zeros((14, 2, 3))
    dets = decode_detections(logits, reg, grid, score_thresh=0.5)
    assert len(dets) == 1
    anchor_index = (0 * 3 + 2) * 2 + 1
    assert tuple(dets[0].box) == pytest.approx(tuple(grid.boxes[anchor_index]))
    assert dets[0].score == pytest.approx(1.0 / (1.0 + math.exp(-3.0)))
    assert decode_detections(logits, reg, grid, score_thresh=0.99) == []
    with pytest.raises(ValueError):
        decode_detections(np.zeros((2, 2, 2)), np.zeros((14, 2, 2)), grid)


def test_export_ply(tmp_path):
    path = tmp_path / "scene.ply"
    points = np.array([[1.0, 2.0, 3.0, 0.5], [4.0, 5.0, 6.0, 0.1]])
    export_ply(str(path), points, [list(_box(10.0)), list(_box(20.0))], [(0, 255, 0), (255, 0, 0)])
    lines = path.read_text(encoding="ascii").splitlines()
    end = lines.index("end_header")
    assert "element vertex 18" in lines
    assert f"element edge {2 * len(BOX_EDGES)}" in lines
    body = lines[end + 1:]
    assert len(body) == 18 + 2 * len(BOX_EDGES)
    assert body[0] == "1.0000 2.0000 3.0000 160 160 160"
    assert body[2 + 8].endswith("255 0 0")
