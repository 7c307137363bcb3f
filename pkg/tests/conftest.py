"""
测试共用夹具
"""

import numpy as np
import pytest

from config import build_config
from io_kitti import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def reduced_config():
    return build_config("reduced")


@pytest.fixture
def tiny_config():
    """8m x 8m 范围、通道极少的配置，整网前向/反向在 1 秒量级"""
    return build_config("reduced", {
        "voxel": {"range": (-3.0, 1.0, -4.0, 4.0, 0.0, 8.0), "max_voxels": 800, "max_points": 8},
        "model": {
            "vfe_channels": (4, 8),
            "feature_dim": 8,
            "middle_channels": 4,
            "rpn_block_channels": (8, 8, 8),
            "rpn_block_convs": (1, 1, 1),
            "rpn_upsample_channels": 8,
        },
        "train": {"batch_size": 2, "epochs": 3, "decay_epoch": 2},
    })


def random_cloud(rng, range_zyx, count):
    """范围内均匀分布的点云"""
    z0, z1, y0, y1, x0, x1 = range_zyx
    points = np.column_stack([
        rng.uniform(x0, x1, count),
        rng.uniform(y0, y1, count),
        rng.uniform(z0, z1, count),
        rng.uniform(0.0, 1.0, count),
    ]).astype(np.float32)
    # float32 舍入可能把点推到上界
    upper = np.array([x1, y1, z1], dtype=np.float32)
    points[:, :3] = np.minimum(points[:, :3], np.nextafter(upper, np.float32(-np.inf)))
    return PointCloud(points=points)
