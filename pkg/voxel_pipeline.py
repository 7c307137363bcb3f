"""
体素化管线
空间划分、点分组与随机采样、单遍 O(n) 构建 K×T×7 输入特征缓冲与 K×3 坐标缓冲；
体素坐标到缓冲行号的哈希用稠密查找表（直接寻址）实现
"""

import struct
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from accel import njit
from config import VoxelConfig
from errors import ConfigError, InvariantError, ShapeError, VoxelDumpError
from io_kitti import PointCloud

logger = logging.getLogger(__name__)

FEATURE_DIM = 7
DUMP_MAGIC = b"VXPB"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4s7I")


@dataclass
class VoxelStats:
    """一次缓冲构建的统计"""

    num_points: int = 0
    num_voxels: int = 0
    kept_points: int = 0
    # 体素已满 T 个点后被忽略的点
    point_overflow: int = 0
    # 体素数已达 K 后，落在新体素中被忽略的点与体素
    voxel_overflow_points: int = 0
    voxel_overflow_voxels: int = 0
    out_of_grid: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class VoxelBuffers:
    """
    稠密体素缓冲
    features: (K, T, 7)；coords: (K, 3) 为 (d, h, w)；counts: (K,)；前 num_voxels 行有效
    point_ids: (K, T) 原始点下标，空行为 -1
    """

    features: np.ndarray
    coords: np.ndarray
    counts: np.ndarray
    num_voxels: int
    grid: Tuple[int, int, int]
    point_ids: Optional[np.ndarray] = None
    stats: VoxelStats = field(default_factory=VoxelStats)

    @property
    def capacity(self) -> int:
        return self.features.shape[0]

    @property
    def max_points(self) -> int:
        return self.features.shape[1]

    def occupied_mask(self) -> np.ndarray:
        """(K, T) 布尔掩码，行号小于 counts[k] 为真"""
        return np.arange(self.max_points)[None, :] < self.counts[:, None]

    def active(self) -> "VoxelBuffers":
        """只保留前 num_voxels 行的视图"""
        n = self.num_voxels
        return VoxelBuffers(
            features=self.features[:n],
            coords=self.coords[:n],
            counts=self.counts[:n],
            num_voxels=n,
            grid=self.grid,
            point_ids=None if self.point_ids is None else self.point_ids[:n],
            stats=self.stats,
        )


@dataclass
class VoxelBatch:
    """多帧体素拼接，batch_index 标记每个体素所属帧"""

    features: np.ndarray
    coords: np.ndarray
    counts: np.ndarray
    batch_index: np.ndarray
    batch_size: int
    grid: Tuple[int, int, int]

    @property
    def num_voxels(self) -> int:
        return self.features.shape[0]


def grid_dims(config: VoxelConfig) -> Tuple[int, int, int]:
    """
    计算体素网格尺寸 (D', H', W')

    Args:
        config: 体素配置

    Returns:
        各轴体素个数
    """
    dims = []
    for axis in range(3):
        extent = config.range[2 * axis + 1] - config.range[2 * axis]
        size = config.voxel_size[axis]
        count = int(round(extent / size))
        if count < 1 or abs(count * size - extent) > 1e-6 * max(1.0, abs(extent)):
            raise ConfigError(f"第 {axis} 轴范围 {extent} 不是体素尺寸 {size} 的整数倍")
        dims.append(count)
    return tuple(dims)


def voxel_indices(xyz: np.ndarray, config: VoxelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    批量计算点所在体素

    Args:
        xyz: (N, 3) 点坐标 (x, y, z)
        config: 体素配置

    Returns:
        (indices (N, 3) int64 为 (d, h, w), in_grid (N,) 布尔)
    """
    dims = np.asarray(grid_dims(config), dtype=np.int64)
    pts = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    z_min, z_max, y_min, y_max, x_min, x_max = config.range
    # 列顺序 z, y, x 对应 d, h, w
    zyx = pts[:, ::-1]
    lows = np.array([z_min, y_min, x_min])
    highs = np.array([z_max, y_max, x_max])
    in_grid = np.all((zyx >= lows) & (zyx < highs), axis=1)
    idx = np.floor((zyx - lows) / np.asarray(config.voxel_size)).astype(np.int64)
    # 上界附近的舍入误差
    idx = np.where(in_grid[:, None], np.clip(idx, 0, dims - 1), idx)
    return idx, in_grid


def voxel_index(point, config: VoxelConfig) -> Tuple[int, int, int]:
    """
    单个点所在体素 (d, h, w)

    Args:
        point: (x, y, z[, r])
        config: 体素配置

    Returns:
        体素下标
    """
    idx, in_grid = voxel_indices(np.asarray(point, dtype=np.float64)[:3], config)
    if not in_grid[0]:
        raise InvariantError(f"点 {tuple(point)} 不在范围 {config.range} 内，需先裁剪")
    return tuple(int(v) for v in idx[0])


@njit(cache=True)
def _fill_buffers(points, idx, valid, dims, lookup, features, coords, counts, point_ids, order):
    """
    单遍填充：查表得到行号，新体素在未满 K 时分配，已有体素在未满 T 时追加
    返回 (num_voxels, point_overflow, voxel_overflow_points, voxel_overflow_voxels)
    """
    capacity = features.shape[0]
    max_points = features.shape[1]
    hw = dims[1] * dims[2]
    num_voxels = 0
    point_overflow = 0
    overflow_points = 0
    overflow_voxels = 0
    for n in range(order.shape[0]):
        i = order[n]
        if not valid[i]:
            continue
        key = idx[i, 0] * hw + idx[i, 1] * dims[2] + idx[i, 2]
        slot = lookup[key]
        if slot == -1:
            if num_voxels >= capacity:
                # -2 标记已被丢弃的新体素
                lookup[key] = -2
                overflow_points += 1
                overflow_voxels += 1
                continue
            slot = num_voxels
            lookup[key] = slot
            coords[slot, 0] = idx[i, 0]
            coords[slot, 1] = idx[i, 1]
            coords[slot, 2] = idx[i, 2]
            num_voxels += 1
        elif slot == -2:
            overflow_points += 1
            continue
        c = counts[slot]
        if c >= max_points:
            point_overflow += 1
            continue
        for j in range(4):
            features[slot, c, j] = points[i, j]
        point_ids[slot, c] = i
        counts[slot] = c + 1
    return num_voxels, point_overflow, overflow_points, overflow_voxels


def build_buffers(cloud: PointCloud, config: VoxelConfig,
                  permutation: Optional[np.ndarray] = None) -> VoxelBuffers:
    """
    单遍构建体素缓冲

    点先按 rng_seed 整体打乱，再按顺序先到先得：新体素在 num_voxels < K 时分配，
    已有体素在点数 < T 时追加，其余点忽略。缓冲行顺序即体素首次出现的顺序。

    Args:
        cloud: 已裁剪到范围内的点云
        config: 体素配置
        permutation: 指定点的处理顺序（测试用），默认由 rng_seed 生成

    Returns:
        VoxelBuffers，特征后三维为 0，待 augment_with_centroid 填充
    """
    dims = grid_dims(config)
    points = cloud.points
    n = points.shape[0]
    if permutation is None:
        permutation = np.random.default_rng(config.rng_seed).permutation(n)
    order = np.asarray(permutation, dtype=np.int64)
    if order.shape != (n,):
        raise ShapeError(f"排列长度 {order.shape} 与点数 {n} 不一致")

    idx, valid = voxel_indices(points[:, :3], config)
    out_of_grid = int(n - valid.sum())
    if out_of_grid:
        logger.warning(f"{out_of_grid} 个点不在体素网格内，已跳过（是否忘记裁剪？）")

    capacity, max_points = config.max_voxels, config.max_points
    features = np.zeros((capacity, max_points, FEATURE_DIM), dtype=np.float32)
    coords = np.zeros((capacity, 3), dtype=np.int64)
    counts = np.zeros(capacity, dtype=np.int64)
    point_ids = np.full((capacity, max_points), -1, dtype=np.int64)
    lookup = np.full(dims[0] * dims[1] * dims[2], -1, dtype=np.int64)

    num_voxels, point_overflow, overflow_points, overflow_voxels = _fill_buffers(
        points, idx, valid, np.asarray(dims, dtype=np.int64), lookup,
        features, coords, counts, point_ids, order,
    )
    stats = VoxelStats(
        num_points=n,
        num_voxels=int(num_voxels),
        kept_points=int(counts.sum()),
        point_overflow=int(point_overflow),
        voxel_overflow_points=int(overflow_points),
        voxel_overflow_voxels=int(overflow_voxels),
        out_of_grid=out_of_grid,
    )
    if overflow_voxels:
        logger.warning(f"体素数达到上限 K={capacity}，丢弃 {overflow_voxels} 个体素 ({overflow_points} 个点)")
    logger.debug(f"体素化: {stats.as_dict()}")
    return VoxelBuffers(features, coords, counts, int(num_voxels), dims, point_ids, stats)


def augment_with_centroid(buffers: VoxelBuffers) -> VoxelBuffers:
    """
    用体素内点的质心偏移填充特征后三维 (x-v_x, y-v_y, z-v_z)

    Args:
        buffers: build_buffers 的输出

    Returns:
        新的 VoxelBuffers（输入不变），空行保持全零
    """
    mask = buffers.occupied_mask()
    xyz = buffers.features[:, :, :3].astype(np.float64)
    denom = np.maximum(buffers.counts, 1).astype(np.float64)[:, None]
    centroid = (xyz * mask[:, :, None]).sum(axis=1) / denom
    offsets = (xyz - centroid[:, None, :]) * mask[:, :, None]
    features = buffers.features.copy()
    features[:, :, 4:7] = offsets.astype(np.float32)
    features[~mask] = 0.0
    return VoxelBuffers(
        features=features,
        coords=buffers.coords,
        counts=buffers.counts,
        num_voxels=buffers.num_voxels,
        grid=buffers.grid,
        point_ids=buffers.point_ids,
        stats=buffers.stats,
    )


def _flat_coords(coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if c.size and (np.any(c < 0) or np.any(c >= np.asarray(dims))):
        raise InvariantError(f"体素坐标超出网格 {tuple(dims)}")
    return np.ravel_multi_index((c[:, 0], c[:, 1], c[:, 2]), tuple(dims))


def scatter_to_dense(voxel_features: np.ndarray, coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """
    把稀疏体素特征写入稠密 C×D'×H'×W' 张量

    Args:
        voxel_features: (K, C)
        coords: (K, 3)
        dims: (D', H', W')

    Returns:
        (C, D', H', W') 张量，未列出的位置为 0
    """
    feats = np.asarray(voxel_features)
    flat = _flat_coords(coords, dims)
    if feats.shape[0] != flat.shape[0]:
        raise ShapeError(f"特征行数 {feats.shape[0]} 与坐标行数 {flat.shape[0]} 不一致")
    if np.unique(flat).shape[0] != flat.shape[0]:
        raise InvariantError("体素坐标重复")
    channels = feats.shape[1] if feats.ndim == 2 else 0
    dense = np.zeros((channels, int(np.prod(dims))), dtype=feats.dtype)
    dense[:, flat] = feats.T
    return dense.reshape((channels,) + tuple(dims))


def gather_from_dense(dense: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """
    scatter_to_dense 的伴随：从稠密张量取出体素特征

    Args:
        dense: (C, D', H', W')
        coords: (K, 3)

    Returns:
        (K, C)
    """
    flat = _flat_coords(coords, dense.shape[1:])
    return dense.reshape(dense.shape[0], -1)[:, flat].T


def scatter_batch(voxel_features: np.ndarray, coords: np.ndarray, batch_index: np.ndarray,
                  batch_size: int, dims: Sequence[int]) -> np.ndarray:
    """多帧版本的 scatter_to_dense，返回 (B, C, D', H', W')"""
    feats = np.asarray(voxel_features)
    out = np.zeros((batch_size, feats.shape[1]) + tuple(dims), dtype=feats.dtype)
    for b in range(batch_size):
        sel = batch_index == b
        out[b] = scatter_to_dense(feats[sel], coords[sel], dims)
    return out


def gather_batch(dense: np.ndarray, coords: np.ndarray, batch_index: np.ndarray) -> np.ndarray:
    """多帧版本的 gather_from_dense"""
    out = np.zeros((coords.shape[0], dense.shape[1]), dtype=dense.dtype)
    for b in range(dense.shape[0]):
        sel = batch_index == b
        if sel.any():
            out[sel] = gather_from_dense(dense[b], coords[sel])
    return out


def collate_buffers(frames: List[VoxelBuffers]) -> VoxelBatch:
    """
    把多帧的有效体素拼接为一个批次

    Args:
        frames: 每帧的 VoxelBuffers（需同一网格、同一 T）

    Returns:
        VoxelBatch
    """
    if not frames:
        raise ShapeError("空批次")
    grid = frames[0].grid
    if any(f.grid != grid or f.max_points != frames[0].max_points for f in frames):
        raise ShapeError("批次内网格或 T 不一致")
    active = [f.active() for f in frames]
    return VoxelBatch(
        features=np.concatenate([a.features for a in active], axis=0),
        coords=np.concatenate([a.coords for a in active], axis=0),
        counts=np.concatenate([a.counts for a in active], axis=0),
        batch_index=np.concatenate([np.full(a.num_voxels, b, dtype=np.int64) for b, a in enumerate(active)]),
        batch_size=len(frames),
        grid=grid,
    )


def dump_buffers(buffers: VoxelBuffers, path: str) -> None:
    """
    写出体素缓冲：头部 (magic, 版本, K, T, D', H', W', num_voxels)，
    随后 features (K×T×7 float32)、coords (K×3 int32)、counts (K int32)，均为小端
    """
    capacity, max_points = buffers.capacity, buffers.max_points
    d, h, w = buffers.grid
    with open(path, "wb") as f:
        f.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, capacity, max_points, d, h, w, buffers.num_voxels))
        f.write(np.ascontiguousarray(buffers.features, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(buffers.coords, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(buffers.counts, dtype="<i4").tobytes())
    logger.info(f"体素缓冲已写出: {path}")


def load_buffers(path: str) -> VoxelBuffers:
    """读取 dump_buffers 写出的文件"""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _DUMP_HEADER.size:
        raise VoxelDumpError(f"{path}: 文件头不完整")
    magic, version, capacity, max_points, d, h, w, num_voxels = _DUMP_HEADER.unpack_from(raw, 0)
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise VoxelDumpError(f"{path}: 不支持的文件头 {magic!r} v{version}")
    sizes = [capacity * max_points * FEATURE_DIM * 4, capacity * 3 * 4, capacity * 4]
    if len(raw) != _DUMP_HEADER.size + sum(sizes):
        raise VoxelDumpError(f"{path}: 长度 {len(raw)} 与头部声明不符")
    offset = _DUMP_HEADER.size
    features = np.frombuffer(raw, dtype="<f4", count=capacity * max_points * FEATURE_DIM, offset=offset)
    offset += sizes[0]
    coords = np.frombuffer(raw, dtype="<i4", count=capacity * 3, offset=offset)
    offset += sizes[1]
    counts = np.frombuffer(raw, dtype="<i4", count=capacity, offset=offset)
    return VoxelBuffers(
        features=features.reshape(capacity, max_points, FEATURE_DIM).astype(np.float32),
        coords=coords.reshape(capacity, 3).astype(np.int64),
        counts=counts.astype(np.int64),
        num_voxels=int(num_voxels),
        grid=(d, h, w),
    )
