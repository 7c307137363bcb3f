import math

import pytest
from pytest import approx

from config import DefaultConfig, build_config, load_config, parse_flat_config
from env_manager import EnvManager
from errors import ConfigError
from voxel_pipeline import grid_dims


def test_car_profile_defaults():
    config = build_config("car")
    assert config.voxel.range == DefaultConfig.CAR_RANGE
    assert config.voxel.max_points == 35
    assert config.voxel.max_voxels == 20000
    assert config.target.anchor_size == (3.9, 1.6, 1.56)
    assert config.target.anchor_rotations == approx((0.0, math.pi / 2))
    assert (config.target.pos_iou, config.target.neg_iou) == (0.6, 0.45)
    assert config.model.bn_momentum == 0.99
    assert config.train.learning_rate == 0.01
    assert grid_dims(config.voxel) == (10, 400, 352)


def test_pedestrian_profile():
    config = build_config("pedestrian")
    assert grid_dims(config.voxel) == (10, 200, 240)
    assert config.voxel.max_points == 45
    assert config.target.kitti_name == "Pedestrian"
    assert config.target.anchor_z == -0.6
    assert config.model.rpn_first_strides[0] == 1
    assert config.target.eval_iou == 0.5


def test_cyclist_profile_anchor():
    assert build_config("cyclist").target.anchor_size == (1.76, 0.6, 1.73)


def test_reduced_profile_grid():
    assert grid_dims(build_config("reduced").voxel) == (10, 80, 80)


def test_unknown_profile():
    with pytest.raises(ConfigError):
        build_config("truck")


def test_invalid_override_is_config_error():
    with pytest.raises(ConfigError):
        build_config("car", {"voxel": {"max_points": 0}})
    with pytest.raises(ConfigError):
        build_config("car", {"target": {"pos_iou": 0.3, "neg_iou": 0.5}})


def test_parse_flat_config_nests_dotted_keys():
    nested = parse_flat_config({"voxel.max_voxels": "100", "voxel.range": "-3, 1, -8, 8, 0, 16", "seed": "3"})
    assert nested == {"voxel": {"max_voxels": "100", "range": ["-3", "1", "-8", "8", "0", "16"]}, "seed": "3"}


def test_load_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("# 注释\nprofile = reduced\nseed = 7\nvoxel.max_voxels = 1000\naug.enable_rotate = false\n")
    config = load_config(str(path))
    assert config.profile == "reduced"
    assert config.seed == 7
    assert config.voxel.max_voxels == 1000
    assert config.aug.enable_rotate is False
    assert config.model.feature_dim == 32


def test_load_config_rejects_bad_value(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("voxel.max_points = many\n")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.conf")


def test_snapshot_is_json_friendly():
    snapshot = build_config("car").snapshot()
    assert snapshot["voxel"]["max_voxels"] == 20000
    assert snapshot["target"]["name"] == "car"


def test_env_seed_overrides_config(monkeypatch):
    monkeypatch.setenv("VOXELPIPE_SEED", "42")
    monkeypatch.setenv("VOXELPIPE_THREADS", "3")
    env = EnvManager()
    config = env.apply_overrides(build_config("car"))
    assert config.seed == 42
    assert env.resolve_threads() == 3
    assert env.resolve_threads(5) == 5


def test_env_without_seed_keeps_config(monkeypatch):
    monkeypatch.delenv("VOXELPIPE_SEED", raising=False)
    monkeypatch.setenv("VOXELPIPE_THREADS", "not-a-number")
    env = EnvManager()
    config = build_config("car")
    assert env.apply_overrides(config) is config
    assert env.resolve_threads() == 1
