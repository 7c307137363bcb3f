import csv
import os
from pathlib import Path

import numpy as np
import pytest

from box_geometry import bev_iou, boxes_collide
from config import build_config, load_config
from errors import ConfigError, DivergenceError
from nn_kernels.checkpoint import load_checkpoint
from nn_kernels.tensor import Tensor
from postprocess_eval import Detection
from targets_loss import match_anchors
from trainer import (LOSS_COLUMNS, MOMENTUM_PREFIX, PreparedBatch, SgdOptimizer, SyntheticDataset, Trainer,
                     infer_scene, learning_rate, make_synthetic_scene, membership_counts, open_dataset, train)

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def momentum_config(tiny_config):
    return tiny_config.model_copy(update={"train": tiny_config.train.model_copy(update={"momentum": 0.9})})


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def test_synthetic_scene_boxes(reduced_config):
    for seed in range(10):
        scene = make_synthetic_scene(np.random.default_rng(seed), reduced_config.target, reduced_config.voxel.range)
        assert 1 <= len(scene.boxes) <= 4
        assert scene.classes == ["Car"] * len(scene.boxes)
        for i in range(len(scene.boxes)):
            for j in range(i + 1, len(scene.boxes)):
                assert not boxes_collide(scene.boxes[i], scene.boxes[j])
        counts = membership_counts(scene)
        assert np.all((counts >= 50) & (counts <= 300))


def test_sgd_without_momentum():
    param = Tensor(np.array([1.0, 2.0]), name="w")
    param.grad = np.array([0.5, -1.0])
    SgdOptimizer({"w": param}).step(0.1)
    assert param.data.tolist() == pytest.approx([0.95, 2.1])


def test_sgd_momentum_accumulates():
    param = Tensor(np.array([1.0]), name="w")
    optimizer = SgdOptimizer({"w": param}, momentum=0.9)
    for _ in range(2):
        param.grad = np.array([1.0])
        optimizer.step(0.1)
    # v1 = 1, v2 = 0.9 + 1
    assert param.data[0] == pytest.approx(1.0 - 0.1 - 0.19)
    state = optimizer.state_dict()
    assert state[f"{MOMENTUM_PREFIX}w"].tolist() == pytest.approx([1.9])

    other = SgdOptimizer({"w": Tensor(np.array([0.0]), name="w")}, momentum=0.9)
    other.load_state_dict(state)
    assert other.velocity["w"].tolist() == pytest.approx([1.9])


def test_learning_rate_schedule():
    settings = build_config("car").train
    assert learning_rate(0, settings) == 0.01
    assert learning_rate(149, settings) == 0.01
    assert learning_rate(150, settings) == 0.001
    assert learning_rate(159, settings) == 0.001


def test_dataset_errors(tiny_config, tmp_path):
    with pytest.raises(ConfigError):
        SyntheticDataset(0, tiny_config)
    with pytest.raises(ConfigError):
        open_dataset("synthetic:many", tiny_config)
    with pytest.raises(ConfigError):
        open_dataset(str(tmp_path), tiny_config)
    (tmp_path / "velodyne").mkdir()
    with pytest.raises(ConfigError):
        open_dataset(str(tmp_path), tiny_config)


def test_synthetic_dataset_is_seeded(tiny_config):
    a = open_dataset("synthetic:3", tiny_config)
    b = SyntheticDataset(3, tiny_config)
    assert len(a) == 3
    assert a.frame_id(2) == "000002"
    for i in range(3):
        assert np.array_equal(a[i].cloud.points, b[i].cloud.points)
    labels = a.label_set(0)
    assert len(labels.boxes_of("Car")) == len(a[0].boxes)


def test_epoch_order_covers_dataset(tiny_config):
    trainer = Trainer(tiny_config, SyntheticDataset(5, tiny_config))
    batches = trainer.epoch_batches(0)
    assert [len(b) for b in batches] == [2, 2, 1]
    assert sorted(sum(batches, [])) == list(range(5))
    assert trainer.epoch_batches(0) == batches


def test_batch_without_positives_is_skipped(tiny_config):
    trainer = Trainer(tiny_config, SyntheticDataset(2, tiny_config))
    prepared = trainer.prepare_batch(0, [0, 1])
    empty = [match_anchors(trainer.grid, np.zeros((0, 7)), tiny_config.target) for _ in range(2)]
    before = trainer.params["voxelnet.rpn.score_head.bias"].data.copy()
    assert trainer.train_step(PreparedBatch(prepared.batch, empty), lr=0.01) is None
    assert np.array_equal(trainer.params["voxelnet.rpn.score_head.bias"].data, before)


def test_non_finite_loss_raises(tiny_config):
    trainer = Trainer(tiny_config, SyntheticDataset(2, tiny_config))
    prepared = trainer.prepare_batch(0, [0, 1])
    trainer.params["voxelnet.rpn.score_head.bias"].data[...] = np.nan
    with pytest.raises(DivergenceError):
        trainer.train_step(prepared, lr=0.01)


def test_train_writes_loss_csv_and_checkpoints(tiny_config, tmp_path):
    out = tmp_path / "run"
    result = train(tiny_config, SyntheticDataset(4, tiny_config), out_dir=str(out))
    rows = _read_csv(out / "loss.csv")
    assert rows[0] == LOSS_COLUMNS
    assert len(rows) - 1 == result.steps == len(result.losses)
    assert [int(r[0]) for r in rows[1:]] == [row["step"] for row in result.losses]
    for row, expected in zip(rows[1:], result.losses):
        assert float(row[1]) == pytest.approx(expected["loss"], rel=1e-8)
        assert float(row[1]) == pytest.approx(float(row[2]) + float(row[3]) + float(row[4]), rel=1e-6)
    assert os.path.exists(out / "epoch_0002.vxpc")
    assert os.path.exists(out / "epoch_0003.vxpc")
    assert result.checkpoint == str(out / "final.vxpc")
    _, meta = load_checkpoint(result.checkpoint)
    assert meta["epoch"] == 3.0
    assert meta["step"] == float(result.steps)


def test_max_steps_stops_early(tiny_config, tmp_path):
    result = train(tiny_config, SyntheticDataset(4, tiny_config), out_dir=str(tmp_path), max_steps=1)
    assert result.steps == 1
    assert len(_read_csv(tmp_path / "loss.csv")) == 2


def test_resume_continues_the_same_curve(momentum_config, tmp_path):
    dataset = SyntheticDataset(4, momentum_config)
    straight = train(momentum_config, dataset, out_dir=str(tmp_path / "straight"), max_steps=3)

    first = train(momentum_config, dataset, out_dir=str(tmp_path / "split"), max_steps=2)
    state, _ = load_checkpoint(first.checkpoint)
    assert any(k.startswith(MOMENTUM_PREFIX) for k in state)
    resumed = train(momentum_config, dataset, out_dir=str(tmp_path / "split"), resume=first.checkpoint, max_steps=3)

    assert [r["step"] for r in resumed.losses] == [2]
    assert resumed.losses[0]["loss"] == pytest.approx(straight.losses[2]["loss"], rel=1e-6)
    rows = _read_csv(tmp_path / "split" / "loss.csv")
    assert rows[0] == LOSS_COLUMNS
    assert len(rows) == 4


def test_infer_scene_returns_suppressed_detections(tiny_config):
    trainer = Trainer(tiny_config, SyntheticDataset(1, tiny_config))
    dets = infer_scene(trainer.model, trainer.grid, trainer.dataset[0], tiny_config, score_thresh=0.5)
    assert all(isinstance(d, Detection) for d in dets)
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    assert all(s >= 0.5 for s in scores)
    for i, a in enumerate(dets):
        for b in dets[i + 1:]:
            assert bev_iou(a.box, b.box) <= tiny_config.eval.nms_iou


@pytest.mark.slow
def test_overfit_small_dataset(tmp_path):
    config = load_config(str(CONFIG_DIR / "overfit.conf"))
    dataset = SyntheticDataset(4, config)
    trainer = Trainer(config, dataset, out_dir=str(tmp_path))
    result = trainer.train()
    losses = [row["loss"] for row in result.losses]
    assert result.steps == 200
    assert np.isfinite(losses).all()
    assert np.mean(losses[-5:]) <= 0.1 * losses[0]

    matched = total = 0
    for i in range(len(dataset)):
        scene = dataset[i]
        dets = infer_scene(trainer.model, trainer.grid, scene, config)
        for gt in scene.boxes:
            total += 1
            matched += any(bev_iou(d.box, gt) >= 0.5 for d in dets)
    assert total > 0
    assert matched == total
