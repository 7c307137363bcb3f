"""
性能监控
记录各阶段耗时与进程内存，提供 bench 子命令的分阶段计时
"""
import time
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional

import numpy as np
import psutil

from config import PipelineConfig

logger = logging.getLogger(__name__)

BENCH_STAGES = ["buffer_build", "vfe", "middle", "rpn"]


@dataclass
class StageRecord:
    name: str
    seconds: float
    rss_mb: float


@dataclass
class StageMonitor:
    """阶段监控：每个阶段的墙钟时间与结束时的进程 RSS"""

    records: List[StageRecord] = field(default_factory=list)

    def __post_init__(self):
        try:
            self._process: Optional[psutil.Process] = psutil.Process()
        except psutil.Error:
            self._process = None

    def memory_mb(self) -> float:
        """当前进程 RSS（MB），取不到时为 -1"""
        if self._process is None:
            return -1.0
        try:
            return self._process.memory_info().rss / 1024 / 1024
        except psutil.Error:
            return -1.0

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.records.append(StageRecord(name, elapsed, self.memory_mb()))
            logger.debug(f"阶段 {name}: {elapsed * 1000:.2f} ms")

    def timings(self) -> Dict[str, List[float]]:
        result: Dict[str, List[float]] = {}
        for record in self.records:
            result.setdefault(record.name, []).append(record.seconds)
        return result

    def totals(self) -> Dict[str, float]:
        return {name: float(sum(values)) for name, values in self.timings().items()}

    def peak_memory_mb(self) -> float:
        return max((r.rss_mb for r in self.records), default=self.memory_mb())


def summarize_timings(timings: Dict[str, List[float]]) -> Dict[str, Dict[str, float]]:
    """
    各阶段耗时的均值与分位数

    Args:
        timings: 阶段名 -> 多次耗时（秒）

    Returns:
        阶段名 -> {runs, mean_ms, p50_ms, p95_ms}
    """
    summary = {}
    for name, values in timings.items():
        ms = np.asarray(values, dtype=np.float64) * 1000.0
        summary[name] = {
            "runs": int(ms.size),
            "mean_ms": float(ms.mean()) if ms.size else 0.0,
            "p50_ms": float(np.percentile(ms, 50)) if ms.size else 0.0,
            "p95_ms": float(np.percentile(ms, 95)) if ms.size else 0.0,
        }
    return summary


def format_timing_table(summary: Dict[str, Dict[str, float]]) -> str:
    lines = [f"{'阶段':<14}{'次数':>6}{'均值(ms)':>12}{'p50(ms)':>12}{'p95(ms)':>12}"]
    for name, row in summary.items():
        lines.append(f"{name:<14}{row['runs']:>6d}{row['mean_ms']:>12.3f}{row['p50_ms']:>12.3f}{row['p95_ms']:>12.3f}")
    return "\n".join(lines)


def run_bench(config: PipelineConfig, repetitions: int = 3, num_points: Optional[int] = None,
              monitor: Optional[StageMonitor] = None) -> Dict[str, Dict[str, float]]:
    """
    分阶段计时：体素缓冲构建、VFE、中间卷积层、RPN，各重复 repetitions 次

    Args:
        config: 管线配置
        repetitions: 重复次数
        num_points: 随机点云的点数，默认取体素容量的 4 倍
        monitor: 复用的监控器

    Returns:
        summarize_timings 的结果，键顺序与 BENCH_STAGES 一致
    """
    from detector import VoxelNet, reshape_to_bev
    from io_kitti import PointCloud
    from voxel_pipeline import augment_with_centroid, build_buffers, collate_buffers, scatter_batch

    monitor = monitor or StageMonitor()
    rng = np.random.default_rng(config.seed)
    z_min, z_max, y_min, y_max, x_min, x_max = config.voxel.range
    count = num_points or 4 * config.voxel.max_voxels
    points = np.column_stack([
        rng.uniform(x_min, x_max, count),
        rng.uniform(y_min, y_max, count),
        rng.uniform(z_min, z_max, count),
        rng.uniform(0.0, 1.0, count),
    ]).astype(np.float32)
    cloud = PointCloud(points=points)
    model = VoxelNet(config).eval()

    for _ in range(max(1, repetitions)):
        with monitor.stage("buffer_build"):
            buffers = augment_with_centroid(build_buffers(cloud, config.voxel))
        batch = collate_buffers([buffers])
        with monitor.stage("vfe"):
            voxel_features = model.feature_net.forward(batch.features, counts=batch.counts)
        with monitor.stage("middle"):
            dense = scatter_batch(voxel_features, batch.coords, batch.batch_index, batch.batch_size, model.grid)
            mid = model.middle.forward(dense)
        with monitor.stage("rpn"):
            model.rpn.forward(reshape_to_bev(mid, expected_depth=model.bev_depth))

    summary = summarize_timings(monitor.timings())
    logger.info(f"bench 完成: {count} 点，{buffers.num_voxels} 个体素，峰值内存 {monitor.peak_memory_mb():.1f} MB")
    return {name: summary[name] for name in BENCH_STAGES}
