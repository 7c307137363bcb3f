"""
自检
在随机数据上运行不变式检查：梯度检查、与参考实现的一致性、往返读写；默认小规模，full 使用大规模数据
"""

import os
import time
import logging
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

import oracles
from box_geometry import bev_iou, bev_iou_matrix
from config import build_config
from errors import CheckpointError
from io_kitti import PointCloud
from nn_kernels import conv as conv_ops
from nn_kernels import functional as F
from nn_kernels.checkpoint import load_checkpoint, save_checkpoint
from nn_kernels.grad_check import grad_check
from postprocess_eval import Detection, nms_bev
from targets_loss import (TrainTargets, decode_residuals, encode_residuals, flatten_regression, flatten_scores,
                          make_anchor_grid, match_anchors, total_loss)
from vfe_net import FeatureNet
from voxel_pipeline import build_buffers

logger = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    name: str
    group: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class SelfCheckReport:
    results: List[SuiteResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        lines = []
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            lines.append(f"[{status}] {r.group}/{r.name} ({r.seconds:.2f}s) {r.detail}")
        failed = sum(not r.passed for r in self.results)
        lines.append(f"共 {len(self.results)} 项，失败 {failed} 项")
        return "\n".join(lines)


@dataclass(frozen=True)
class SelfCheckSizes:
    """随机检查的规模"""
    clouds: int = 5
    max_cloud_points: int = 3000
    iou_pairs: int = 1
    residual_pairs: int = 500
    matching_scenes: int = 5


QUICK_SIZES = SelfCheckSizes()
FULL_SIZES = SelfCheckSizes(clouds=100, max_cloud_points=100_000, iou_pairs=50, residual_pairs=10_000,
                            matching_scenes=100)

SuiteFn = Callable[[SelfCheckSizes], str]
SUITES: Dict[str, List[SuiteFn]] = {}


def suite(group: str):
    """注册一个检查；检查函数接收规模参数并返回说明文字，失败时抛 AssertionError"""

    def register(fn: SuiteFn) -> SuiteFn:
        SUITES.setdefault(group, []).append(fn)
        return fn

    return register


def _reduced():
    return build_config("reduced", {"model": {"vfe_channels": (4, 8), "feature_dim": 8}})


@suite("voxel")
def voxel_buffers_match_naive_grouping(sizes: SelfCheckSizes) -> str:
    config = build_config("reduced", {"voxel": {"max_voxels": 300, "max_points": 5}})
    z0, z1, y0, y1, x0, x1 = config.voxel.range
    rng = np.random.default_rng(1)
    for trial in range(sizes.clouds):
        n = int(rng.integers(100, sizes.max_cloud_points + 1))
        # 聚集在少数区域，使 T 溢出与 K 溢出都会发生
        centers = rng.uniform([x0, y0, z0], [x1, y1, z1], size=(20, 3))
        xyz = centers[rng.integers(0, 20, n)] + rng.normal(0, 0.3, (n, 3))
        xyz = np.clip(xyz, [x0, y0, z0], np.array([x1, y1, z1]) - 1e-3)
        cloud = PointCloud(np.column_stack([xyz, rng.uniform(0, 1, n)]).astype(np.float32))
        perm = rng.permutation(n)
        buffers = build_buffers(cloud, config.voxel, permutation=perm)
        order, groups = oracles.naive_voxelize(cloud.points, config.voxel, perm)
        assert buffers.num_voxels == len(order), f"第 {trial} 组体素数不一致"
        for k, key in enumerate(order):
            assert tuple(buffers.coords[k]) == key
            got = list(buffers.point_ids[k, :buffers.counts[k]])
            assert got == groups[key], f"体素 {key} 的点集不一致"
    return f"{sizes.clouds} 组随机点云，每组至多 {sizes.max_cloud_points} 点"


@suite("vfe")
def vfe_permutation_and_padding(_sizes: SelfCheckSizes) -> str:
    config = _reduced()
    net = FeatureNet(config.model).astype(np.float64).eval()
    rng = np.random.default_rng(2)
    k, t = 20, 6
    counts = rng.integers(1, t + 1, size=k)
    x = rng.normal(size=(k, t, 7))
    x[np.arange(t)[None, :] >= counts[:, None]] = 0.0
    base = net.forward(x, counts=counts)
    shuffled = x.copy()
    for i in range(k):
        shuffled[i, :counts[i]] = x[i, rng.permutation(counts[i])]
    assert np.allclose(net.forward(shuffled, counts=counts), base, rtol=1e-6, atol=1e-9)
    padded = np.concatenate([x, np.zeros((k, 3, 7))], axis=1)
    assert np.allclose(net.forward(padded, counts=counts), base, rtol=1e-6, atol=1e-9)
    return f"{k} 个体素"


@suite("vfe")
def vfe_gradient(_sizes: SelfCheckSizes) -> str:
    config = _reduced()
    net = FeatureNet(config.model).astype(np.float64).train()
    rng = np.random.default_rng(3)
    counts = rng.integers(1, 5, size=6)
    x = rng.normal(size=(6, 4, 7))
    x[np.arange(4)[None, :] >= counts[:, None]] = 0.0
    r = rng.normal(size=(6, config.model.feature_dim))
    occupied = np.arange(4)[None, :] < counts[:, None]
    values = x[occupied]
    net.forward(x, counts=counts)
    dx = net.backward(r)

    def op():
        padded = np.zeros_like(x)
        padded[occupied] = values
        return float(np.sum(net.forward(padded, counts=counts) * r))

    report = grad_check(op, [values], [dx[occupied]], tol=1e-3, max_entries=40, rng=rng)
    assert report.passed, report.summary()
    return report.summary()


@suite("kernels")
def conv_matches_nested_loops(_sizes: SelfCheckSizes) -> str:
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 3, 5, 6, 4))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    fast = conv_ops.conv_nd(x, w, b, (2, 1, 1), (1, 1, 1))
    assert np.allclose(fast, oracles.naive_conv(x, w, b, (2, 1, 1), (1, 1, 1)), atol=1e-9)
    x2 = rng.normal(size=(1, 3, 4, 5))
    w2 = rng.normal(size=(3, 2, 4, 4))
    fast2 = conv_ops.deconv_nd(x2, w2, None, (2, 2), (1, 1))
    assert np.allclose(fast2, oracles.naive_deconv(x2, w2, None, (2, 2), (1, 1)), atol=1e-9)
    return "conv3d 与 deconv2d"


@suite("kernels")
def conv_gradient(_sizes: SelfCheckSizes) -> str:
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=conv_ops.conv_nd(x, w, b, 2, 1).shape)
    dx, dw, db = conv_ops.conv_nd_backward(r, x, w, 2, 1)

    def op():
        return float(np.sum(conv_ops.conv_nd(x, w, b, 2, 1) * r))

    report = grad_check(op, [x, w, b], [dx, dw, db], tol=1e-4)
    assert report.passed, report.summary()
    return report.summary()


@suite("geometry")
def axis_aligned_iou(sizes: SelfCheckSizes) -> str:
    a = np.array([0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0])
    b = np.array([1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0])
    assert abs(bev_iou(a, b) - 1.0 / 3.0) < 1e-12
    assert abs(bev_iou(a, a) - 1.0) < 1e-12
    rng = np.random.default_rng(6)
    pairs = [(np.array([0.3, -0.2, 0.0, 3.0, 1.5, 1.0, 0.4]), np.array([0.0, 0.1, 0.0, 2.5, 1.8, 1.0, -0.7]))]
    for _ in range(sizes.iou_pairs - 1):
        c, d = (np.array([*rng.uniform(-1, 1, 2), 0.0, *rng.uniform(1, 4, 2), 1.0, rng.uniform(-np.pi, np.pi)])
                for _ in range(2))
        pairs.append((c, d))
    for c, d in pairs:
        mc = oracles.monte_carlo_bev_iou(c, d, rng, samples=500_000)
        assert abs(bev_iou(c, d) - mc) < 0.01, f"IoU {bev_iou(c, d):.4f} 与蒙特卡洛 {mc:.4f} 相差过大"
    return f"轴对齐与 {len(pairs)} 对蒙特卡洛"


@suite("targets")
def residual_roundtrip(sizes: SelfCheckSizes) -> str:
    rng = np.random.default_rng(7)
    n = sizes.residual_pairs
    anchors = np.column_stack([rng.uniform(-30, 30, (n, 3)), rng.uniform(0.5, 4.0, (n, 3)),
                               rng.choice([0.0, np.pi / 2], n)])
    gts = np.column_stack([rng.uniform(-30, 30, (n, 3)), rng.uniform(0.5, 4.0, (n, 3)),
                           rng.uniform(-np.pi, np.pi, n)])
    back = decode_residuals(encode_residuals(gts, anchors), anchors)
    assert np.allclose(back, gts, atol=1e-9)
    return f"{n} 对"


@suite("targets")
def matching_matches_exhaustive(sizes: SelfCheckSizes) -> str:
    config = build_config("reduced")
    grid = make_anchor_grid(config.target, (10, 10), config.voxel.range)
    rng = np.random.default_rng(8)
    for _ in range(sizes.matching_scenes):
        gts = np.column_stack([rng.uniform(1, 15, 3), rng.uniform(-7, 7, 3), np.full(3, -1.0),
                               np.tile(config.target.anchor_size, (3, 1)), rng.uniform(-np.pi, np.pi, 3)])
        match = match_anchors(grid, gts, config.target)
        labels, gt_index = oracles.exhaustive_match(bev_iou_matrix(grid.boxes, gts),
                                                    config.target.pos_iou, config.target.neg_iou)
        assert np.array_equal(match.labels, labels)
        assert np.array_equal(match.gt_index, gt_index)
    return f"{sizes.matching_scenes} 个场景"


@suite("loss")
def loss_matches_termwise(_sizes: SelfCheckSizes) -> str:
    rng = np.random.default_rng(9)
    b, a, h, w = 1, 2, 3, 4
    logits = rng.normal(size=(b, a, h, w))
    reg = rng.normal(size=(b, 7 * a, h, w))
    labels = rng.choice([-1, 0, 1], size=(b, h * w * a)).astype(np.int8)
    labels[0, 0] = 1
    targets = TrainTargets(labels, rng.normal(size=(b, h * w * a, 7)))
    result = total_loss(logits, reg, targets, alpha=1.5, beta=1.0)
    probs = F.sigmoid(flatten_scores(logits)[0])
    expected = oracles.termwise_loss(probs, labels[0], flatten_regression(reg)[0], targets.reg_targets[0], 1.5, 1.0)
    assert abs(result.total - expected) <= 1e-6 * max(1.0, abs(expected))
    return f"L = {result.total:.6f}"


@suite("eval")
def nms_matches_naive(_sizes: SelfCheckSizes) -> str:
    rng = np.random.default_rng(10)
    boxes = np.column_stack([rng.uniform(0, 10, (30, 2)), np.zeros(30), np.full((30, 3), [3.9, 1.6, 1.56]),
                             rng.uniform(-np.pi, np.pi, 30)])
    scores = rng.uniform(0, 1, 30)
    dets = [Detection(tuple(bx), float(s)) for bx, s in zip(boxes, scores)]
    kept = nms_bev(dets, 0.1)
    expected = oracles.naive_nms(boxes, scores, bev_iou, 0.1)
    assert [d.score for d in kept] == [float(scores[i]) for i in expected]
    return f"保留 {len(kept)} 个"


@suite("checkpoint")
def checkpoint_roundtrip_and_corruption(_sizes: SelfCheckSizes) -> str:
    rng = np.random.default_rng(11)
    state = {"a.weight": rng.normal(size=(3, 4)).astype(np.float32), "a.bias": np.zeros(4, np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ckpt.vxpc")
        save_checkpoint(path, state, meta={"step": 7})
        loaded, meta = load_checkpoint(path)
        assert all(np.array_equal(loaded[k], v) for k, v in state.items()) and meta["step"] == 7
        with open(path, "rb") as f:
            raw = f.read()
        with open(path, "wb") as f:
            f.write(raw[:-5])
        try:
            load_checkpoint(path)
        except CheckpointError as e:
            assert e.offset is not None
            return f"截断文件报告: {e}"
    raise AssertionError("截断的权重文件没有被拒绝")


def run_selfcheck(filter_group: Optional[str] = None, full: bool = False) -> SelfCheckReport:
    """
    运行自检

    Args:
        filter_group: 只运行该组（voxel、vfe、kernels、geometry、targets、loss、eval、checkpoint）
        full: 使用大规模随机数据（100 组点云至多 10 万点、1 万对残差、100 个匹配场景）

    Returns:
        SelfCheckReport
    """
    sizes = FULL_SIZES if full else QUICK_SIZES
    report = SelfCheckReport()
    groups = [filter_group] if filter_group else list(SUITES)
    for group in groups:
        if group not in SUITES:
            raise KeyError(f"未知的自检组: {group}，可选 {sorted(SUITES)}")
        for fn in SUITES[group]:
            start = time.perf_counter()
            try:
                detail = fn(sizes)
                passed = True
            except Exception as e:  # noqa: BLE001
                detail, passed = f"{type(e).__name__}: {e}", False
            result = SuiteResult(fn.__name__, group, passed, detail, time.perf_counter() - start)
            report.results.append(result)
            level = logging.INFO if passed else logging.ERROR
            logger.log(level, f"{group}/{fn.__name__}: {'通过' if passed else '失败'} {detail}")
    return report
