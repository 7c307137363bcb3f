"""
在线数据增强
单框扰动（含碰撞回退）、全局缩放、全局绕 Z 轴旋转；按 (seed, epoch, index) 现场生成，不落盘
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

from box_geometry import as_box_array, box_corners_bev, box_membership, collision_pairs, normalize_angle, rotate_z
from config import AugSettings
from io_kitti import PointCloud

logger = logging.getLogger(__name__)


@dataclass
class Scene:
    """一帧场景：点云、真值框与每个框包含的点集 Ω_i（构造时重新计算）"""

    cloud: PointCloud
    boxes: np.ndarray
    classes: List[str] = field(default_factory=list)
    membership: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.boxes = as_box_array(self.boxes)
        if not self.classes:
            self.classes = ["Car"] * self.boxes.shape[0]
        if len(self.classes) != self.boxes.shape[0]:
            raise ValueError(f"类别数 {len(self.classes)} 与框数 {self.boxes.shape[0]} 不一致")
        self.membership = box_membership(self.cloud.points, self.boxes)

    def replace(self, points: Optional[np.ndarray] = None, boxes: Optional[np.ndarray] = None,
                keep: Optional[np.ndarray] = None) -> "Scene":
        """替换点或框后返回新场景，membership 随之重算"""
        cloud = self.cloud if points is None else PointCloud(points=points, rejected=self.cloud.rejected)
        new_boxes = self.boxes if boxes is None else boxes
        classes = list(self.classes)
        if keep is not None:
            new_boxes = new_boxes[keep]
            classes = [c for c, k in zip(classes, keep) if k]
        return Scene(cloud=cloud, boxes=new_boxes, classes=classes)


def _owner_of_points(membership: np.ndarray) -> np.ndarray:
    """每个点归属的第一个框，不在任何框内为 -1"""
    if membership.shape[0] == 0:
        return np.full(membership.shape[1], -1, dtype=np.int64)
    inside = membership.any(axis=0)
    return np.where(inside, np.argmax(membership, axis=0), -1)


def perturb_boxes(scene: Scene, rng, settings: AugSettings = AugSettings()) -> Scene:
    """
    逐框扰动：框及其内部点绕框中心旋转 Δθ ~ U[-r, r]，再平移 (Δx, Δy, Δz) ~ N(0, σ²)

    全部框扰动后做两两碰撞检测（BEV 足迹重叠面积 > 0），碰撞的两个框都回退到原位姿，
    回退后再检测一次，仍与他框碰撞的已扰动框同样回退。

    Args:
        scene: 场景
        rng: 提供 uniform(low, high) 与 normal(mean, std, size) 的随机数发生器
        settings: 增强参数

    Returns:
        新场景（点数、框数不变）
    """
    count = scene.boxes.shape[0]
    if count == 0:
        return scene
    angles = np.zeros(count)
    shifts = np.zeros((count, 3))
    for i in range(count):
        angles[i] = rng.uniform(-settings.perturb_rotation, settings.perturb_rotation)
        shifts[i] = rng.normal(0.0, settings.perturb_translation_std, size=3)

    original = scene.boxes
    moved = original.copy()
    moved[:, :3] += shifts
    moved[:, 6] = normalize_angle(moved[:, 6] + angles)

    active = np.ones(count, dtype=bool)
    for attempt in range(2):
        current = np.where(active[:, None], moved, original)
        pairs = collision_pairs(current)
        offenders = np.unique(pairs.reshape(-1)) if pairs.size else np.zeros(0, dtype=np.int64)
        offenders = offenders[active[offenders]]
        if offenders.size == 0:
            break
        active[offenders] = False
        logger.debug(f"第 {attempt + 1} 次碰撞检测：回退 {offenders.size} 个框")

    final = np.where(active[:, None], moved, original)
    points = scene.cloud.points.copy()
    owner = _owner_of_points(scene.membership)
    for i in np.nonzero(active)[0]:
        sel = owner == i
        if not sel.any():
            continue
        center = original[i, :2]
        local = points[sel, :2].astype(np.float64) - center
        points[sel, :2] = (rotate_z(local, angles[i]) + center + shifts[i, :2]).astype(np.float32)
        points[sel, 2] = (points[sel, 2].astype(np.float64) + shifts[i, 2]).astype(np.float32)
    return scene.replace(points=points, boxes=final)


def global_scale(scene: Scene, rng, settings: AugSettings = AugSettings()) -> Scene:
    """
    所有点坐标、框中心与框尺寸乘以同一个 s ~ U[low, high]，θ 不变

    Args:
        scene: 场景
        rng: 随机数发生器
        settings: 增强参数

    Returns:
        新场景
    """
    low, high = settings.scale_range
    factor = float(rng.uniform(low, high))
    points = scene.cloud.points.copy()
    points[:, :3] = (points[:, :3].astype(np.float64) * factor).astype(np.float32)
    boxes = scene.boxes.copy()
    boxes[:, :6] *= factor
    return scene.replace(points=points, boxes=boxes)


def global_rotate(scene: Scene, rng, settings: AugSettings = AugSettings()) -> Scene:
    """
    所有点与框中心绕原点沿 Z 轴旋转同一个 φ ~ U[-r, r]，每个框 θ += φ，z 不变

    Args:
        scene: 场景
        rng: 随机数发生器
        settings: 增强参数

    Returns:
        新场景
    """
    angle = float(rng.uniform(-settings.rotate_range, settings.rotate_range))
    points = scene.cloud.points.copy()
    points[:, :2] = rotate_z(points[:, :2].astype(np.float64), angle).astype(np.float32)
    boxes = scene.boxes.copy()
    if boxes.shape[0]:
        boxes[:, :2] = rotate_z(boxes[:, :2], angle)
        boxes[:, 6] = normalize_angle(boxes[:, 6] + angle)
    return scene.replace(points=points, boxes=boxes)


def augment_scene(scene: Scene, rng, settings: AugSettings = AugSettings()) -> Scene:
    """按 扰动 → 缩放 → 旋转 的顺序应用启用的增强"""
    if settings.enable_perturb:
        scene = perturb_boxes(scene, rng, settings)
    if settings.enable_scale:
        scene = global_scale(scene, rng, settings)
    if settings.enable_rotate:
        scene = global_rotate(scene, rng, settings)
    return scene


def drop_boxes_outside_range(scene: Scene, range_zyx: Sequence[float]) -> Scene:
    """
    去掉 BEV 外接矩形与检测范围完全不相交的框

    Args:
        scene: 场景
        range_zyx: (z_min, z_max, y_min, y_max, x_min, x_max)

    Returns:
        新场景
    """
    if scene.boxes.shape[0] == 0:
        return scene
    _, _, y_min, y_max, x_min, x_max = range_zyx
    corners = box_corners_bev(scene.boxes)
    lo = corners.min(axis=1)
    hi = corners.max(axis=1)
    keep = (hi[:, 0] > x_min) & (lo[:, 0] < x_max) & (hi[:, 1] > y_min) & (lo[:, 1] < y_max)
    dropped = int((~keep).sum())
    if dropped:
        logger.debug(f"增强后有 {dropped} 个框离开检测范围，已从目标中去掉")
        return scene.replace(keep=keep)
    return scene


class AugmentedStream:
    """
    增强样本流：第 epoch 轮第 index 个样本用 default_rng([seed, epoch, index]) 生成，
    因此与遍历顺序和线程数无关，可随时复现
    """

    def __init__(self, scenes: Sequence[Scene], settings: AugSettings, seed: int = 0,
                 range_zyx: Optional[Sequence[float]] = None):
        self.scenes = scenes
        self.settings = settings
        self.seed = seed
        self.range_zyx = range_zyx

    def __len__(self) -> int:
        return len(self.scenes)

    def sample(self, epoch: int, index: int) -> Scene:
        rng = np.random.default_rng([self.seed, epoch, index])
        scene = augment_scene(self.scenes[index], rng, self.settings)
        if self.range_zyx is not None:
            scene = drop_boxes_outside_range(scene, self.range_zyx)
        return scene

    def epoch(self, epoch: int, order: Optional[Sequence[int]] = None) -> Iterator[Scene]:
        for index in (range(len(self)) if order is None else order):
            yield self.sample(epoch, int(index))
