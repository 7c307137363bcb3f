"""
KITTI 数据读取
velodyne 点云、label_2 标签、calib 标定的解析，以及按任务范围裁剪
"""

import os
import math
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from box_geometry import Box3D, as_box_array, box_corners_3d, normalize_angle
from config import DefaultConfig, SupportedOptions
from errors import CalibrationError, LabelParseError, PointCloudFormatError

logger = logging.getLogger(__name__)

# 标签文件中的框即真值框
GroundTruthBox = Box3D

RECORD_BYTES = 16


@dataclass
class PointCloud:
    """(N, 4) 点云: x, y, z (米) 与反射率 r，点的顺序没有含义"""

    points: np.ndarray
    rejected: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32)
        if pts.size == 0:
            pts = np.zeros((0, 4), dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"点云必须为 (N, 4)，实际 {pts.shape}")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def reflectance(self) -> np.ndarray:
        return self.points[:, 3]

    def subset(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(points=self.points[mask], rejected=self.rejected)


@dataclass
class Calibration:
    """
    LiDAR 到相机的标定
    velo_to_cam: 3x4 刚体变换；rect: 3x3 校正矩阵；proj: 3x4 投影矩阵；image_size: (宽, 高) 像素
    """

    velo_to_cam: np.ndarray
    rect: np.ndarray
    proj: np.ndarray
    image_size: Tuple[int, int] = DefaultConfig.IMAGE_SIZE

    def __post_init__(self):
        self.velo_to_cam = np.asarray(self.velo_to_cam, dtype=np.float64).reshape(3, 4)
        self.rect = np.asarray(self.rect, dtype=np.float64).reshape(3, 3)
        self.proj = np.asarray(self.proj, dtype=np.float64).reshape(3, 4)

    @classmethod
    def default(cls, image_size: Tuple[int, int] = DefaultConfig.IMAGE_SIZE) -> "Calibration":
        """标准轴置换（相机 x=-y, y=-z, z=x）与典型内参，用于没有标定文件的场景"""
        velo_to_cam = np.array([[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
        proj = np.array([[721.5377, 0.0, 609.5593, 0.0], [0.0, 721.5377, 172.854, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(velo_to_cam=velo_to_cam, rect=np.eye(3), proj=proj, image_size=image_size)

    def validate(self) -> None:
        """检查 rect 可逆"""
        if not np.all(np.isfinite(self.rect)) or abs(np.linalg.det(self.rect)) < 1e-12:
            raise CalibrationError("rect 矩阵奇异，无法使用该标定")

    def lidar_to_rect(self, xyz: np.ndarray) -> np.ndarray:
        """LiDAR 坐标转换到校正后的相机坐标"""
        pts = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cam = pts @ self.velo_to_cam[:, :3].T + self.velo_to_cam[:, 3]
        return cam @ self.rect.T

    def rect_to_lidar(self, xyz_rect: np.ndarray) -> np.ndarray:
        """校正相机坐标转换回 LiDAR 坐标"""
        self.validate()
        pts = np.asarray(xyz_rect, dtype=np.float64).reshape(-1, 3)
        cam = np.linalg.solve(self.rect, pts.T).T
        rotation = self.velo_to_cam[:, :3]
        return np.linalg.solve(rotation, (cam - self.velo_to_cam[:, 3]).T).T

    def project_rect(self, xyz_rect: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        把校正相机坐标投影到像素

        Returns:
            (uv (N, 2), depth (N,))；depth 为相机坐标系下的 z
        """
        pts = np.asarray(xyz_rect, dtype=np.float64).reshape(-1, 3)
        homo = np.hstack([pts, np.ones((pts.shape[0], 1))])
        pix = homo @ self.proj.T
        depth = pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = pix[:, :2] / pix[:, 2:3]
        return uv, depth


@dataclass
class LabelRecord:
    """标签或检测结果的一行，框已转换到 LiDAR 坐标系"""

    cls: str
    box: Box3D
    truncation: float = 0.0
    occlusion: int = 0
    alpha: float = 0.0
    bbox2d: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    score: Optional[float] = None

    @property
    def bbox_height(self) -> float:
        return float(self.bbox2d[3] - self.bbox2d[1])


@dataclass
class LabelSet:
    """一个标签文件的解析结果"""

    boxes: List[Box3D] = field(default_factory=list)
    classes: List[str] = field(default_factory=list)
    records: List[LabelRecord] = field(default_factory=list)
    dont_care: List[LabelRecord] = field(default_factory=list)
    dropped: int = 0

    def boxes_of(self, kitti_name: str) -> np.ndarray:
        """某一类别的真值框数组 (N, 7)"""
        return as_box_array([b for b, c in zip(self.boxes, self.classes) if c == kitti_name])


def load_pointcloud(path: str) -> PointCloud:
    """
    读取 KITTI velodyne .bin 点云（每 16 字节为 4 个小端 float32）

    Args:
        path: 文件路径

    Returns:
        PointCloud；非有限值记录被丢弃并计入 rejected，反射率截断到 [0,1]。
        因此与 save_pointcloud 的字节往返只对反射率都在 [0,1] 内的点云成立
    """
    size = os.path.getsize(path)
    if size % RECORD_BYTES:
        raise PointCloudFormatError(f"点云文件被截断: {path} 长度 {size} 不是 16 的倍数")
    data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    finite = np.all(np.isfinite(data), axis=1)
    rejected = int((~finite).sum())
    if rejected:
        logger.warning(f"{path}: 丢弃 {rejected} 条含非有限值的记录")
    points = data[finite].astype(np.float32)
    out_of_range = (points[:, 3] < 0.0) | (points[:, 3] > 1.0)
    if out_of_range.any():
        logger.warning(f"{path}: {int(out_of_range.sum())} 个点的反射率超出 [0,1]，已截断")
        points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)
    logger.debug(f"读取点云 {path}: {points.shape[0]} 个点")
    return PointCloud(points=points, rejected=rejected)


def save_pointcloud(cloud: PointCloud, path: str) -> None:
    """按 velodyne 格式写出点云"""
    np.ascontiguousarray(cloud.points, dtype="<f4").tofile(path)


def crop_to_range(cloud: PointCloud, range_zyx: Sequence[float]) -> PointCloud:
    """
    按范围裁剪点云，下界包含、上界不包含

    Args:
        cloud: 点云
        range_zyx: (z_min, z_max, y_min, y_max, x_min, x_max)

    Returns:
        裁剪后的点云
    """
    z_min, z_max, y_min, y_max, x_min, x_max = range_zyx
    pts = cloud.points
    mask = (
        (pts[:, 2] >= z_min) & (pts[:, 2] < z_max)
        & (pts[:, 1] >= y_min) & (pts[:, 1] < y_max)
        & (pts[:, 0] >= x_min) & (pts[:, 0] < x_max)
    )
    return cloud.subset(mask)


def filter_by_image_frustum(cloud: PointCloud, calib: Calibration) -> PointCloud:
    """
    去掉投影到图像之外或位于相机后方的点

    Args:
        cloud: 点云
        calib: 标定

    Returns:
        过滤后的点云
    """
    calib.validate()
    if len(cloud) == 0:
        return cloud
    rect = calib.lidar_to_rect(cloud.xyz)
    uv, depth = calib.project_rect(rect)
    width, height = calib.image_size
    positive = depth > 0.0
    with np.errstate(invalid="ignore"):
        inside = (uv[:, 0] >= 0.0) & (uv[:, 0] < width) & (uv[:, 1] >= 0.0) & (uv[:, 1] < height)
    return cloud.subset(positive & inside)


def _parse_matrix(values: List[str], shape: Tuple[int, int], key: str, path: str) -> np.ndarray:
    expected = shape[0] * shape[1]
    if len(values) < expected:
        raise CalibrationError(f"{path}: {key} 需要 {expected} 个数值，实际 {len(values)}")
    try:
        return np.array([float(v) for v in values[:expected]], dtype=np.float64).reshape(shape)
    except ValueError as e:
        raise CalibrationError(f"{path}: {key} 数值非法: {e}") from e


def parse_calibration(path: str, image_size: Tuple[int, int] = DefaultConfig.IMAGE_SIZE) -> Calibration:
    """
    读取 KITTI calib 文本（P2, R0_rect, Tr_velo_to_cam）

    Args:
        path: 标定文件路径
        image_size: 图像尺寸 (宽, 高)

    Returns:
        Calibration
    """
    entries = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if ":" not in line:
                continue
            key, rest = line.split(":", 1)
            entries[key.strip()] = rest.split()
    proj_key = "P2"
    rect_key = next((k for k in ("R0_rect", "R_rect") if k in entries), None)
    velo_key = next((k for k in ("Tr_velo_to_cam", "Tr_velo_cam") if k in entries), None)
    if proj_key not in entries or rect_key is None or velo_key is None:
        raise CalibrationError(f"{path}: 缺少 P2 / R0_rect / Tr_velo_to_cam")
    calib = Calibration(
        velo_to_cam=_parse_matrix(entries[velo_key], (3, 4), velo_key, path),
        rect=_parse_matrix(entries[rect_key], (3, 3), rect_key, path),
        proj=_parse_matrix(entries[proj_key], (3, 4), proj_key, path),
        image_size=image_size,
    )
    calib.validate()
    return calib


def camera_to_lidar_box(location, dims_hwl, rotation_y: float, calib: Calibration) -> Box3D:
    """
    相机坐标系底面中心框转为 LiDAR 坐标系几何中心框

    Args:
        location: 底面中心 (x, y, z)，校正相机坐标
        dims_hwl: (h, w, l)
        rotation_y: 绕相机 Y 轴的偏航角
        calib: 标定

    Returns:
        Box3D
    """
    h, w, l = dims_hwl
    bottom = calib.rect_to_lidar(np.asarray(location, dtype=np.float64))[0]
    theta = float(normalize_angle(-rotation_y - math.pi / 2.0))
    return Box3D(float(bottom[0]), float(bottom[1]), float(bottom[2] + h / 2.0), float(l), float(w), float(h), theta)


def boxes_to_camera(boxes, calib: Calibration) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    LiDAR 框转回 KITTI 相机表示（camera_to_lidar_box 的逆）

    Args:
        boxes: (N, 7)
        calib: 标定

    Returns:
        (location (N, 3) 底面中心, dims (N, 3) 为 h/w/l, rotation_y (N,))
    """
    b = as_box_array(boxes)
    bottom = b[:, :3].copy()
    bottom[:, 2] -= b[:, 5] / 2.0
    location = calib.lidar_to_rect(bottom) if b.shape[0] else np.zeros((0, 3))
    dims = b[:, [5, 4, 3]]
    rotation_y = normalize_angle(-b[:, 6] - math.pi / 2.0)
    return location, dims, rotation_y


def project_box_to_image(box, calib: Calibration) -> Tuple[float, float, float, float]:
    """
    三维框投影到图像的 2D 外接框，裁剪到图像范围；相机后方的框返回全零

    Args:
        box: LiDAR 框
        calib: 标定

    Returns:
        (x1, y1, x2, y2)
    """
    corners = box_corners_3d(box)[0]
    rect = calib.lidar_to_rect(corners)
    if np.any(rect[:, 2] <= 0.0):
        return (0.0, 0.0, 0.0, 0.0)
    uv, _ = calib.project_rect(rect)
    width, height = calib.image_size
    x1, y1 = np.clip(uv.min(axis=0), 0.0, [width - 1, height - 1])
    x2, y2 = np.clip(uv.max(axis=0), 0.0, [width - 1, height - 1])
    return (float(x1), float(y1), float(x2), float(y2))


def parse_label_lines(lines: Iterable[str], calib: Calibration, source: str = "<labels>") -> LabelSet:
    """
    解析 KITTI label_2 行（检测结果文件额外带一个 score 字段）

    Args:
        lines: 文本行
        calib: 标定
        source: 用于日志的来源名

    Returns:
        LabelSet
    """
    result = LabelSet()
    for line_number, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 15:
            raise LabelParseError(f"需要 15 个字段，实际 {len(parts)}", line_number)
        cls = parts[0]
        try:
            values = [float(v) for v in parts[1:16]]
        except ValueError as e:
            raise LabelParseError(f"数值非法: {e}", line_number) from e
        truncation, occlusion, alpha = values[0], int(values[1]), values[2]
        bbox2d = tuple(values[3:7])
        dims_hwl = values[7:10]
        location = values[10:13]
        rotation_y = values[13]
        score = values[14] if len(values) > 14 else None
        box = camera_to_lidar_box(location, dims_hwl, rotation_y, calib)
        record = LabelRecord(cls, box, truncation, occlusion, alpha, bbox2d, score)
        if cls == "DontCare":
            result.dont_care.append(record)
        elif cls in SupportedOptions.LABEL_CLASSES:
            result.boxes.append(box)
            result.classes.append(cls)
            result.records.append(record)
        else:
            result.dropped += 1
    if result.dropped:
        logger.info(f"{source}: 丢弃 {result.dropped} 个不在 {SupportedOptions.LABEL_CLASSES} 中的标签")
    return result


def load_labels(path: str, calib: Calibration) -> LabelSet:
    """
    读取 KITTI label_2 标签文件，框转换到 LiDAR 坐标系

    Args:
        path: 标签文件
        calib: 标定

    Returns:
        LabelSet（真值框、类别、DontCare 列表、被丢弃数量）
    """
    with open(path, "r", encoding="utf-8") as f:
        return parse_label_lines(f, calib, source=path)


def format_kitti_line(cls: str, box, score: Optional[float], calib: Calibration) -> str:
    """
    把 LiDAR 框格式化为 KITTI 结果行

    Args:
        cls: KITTI 类别名
        box: LiDAR 框
        score: 置信度，None 表示写成标签行
        calib: 标定

    Returns:
        一行文本（不含换行）
    """
    location, dims, rotation_y = boxes_to_camera(box, calib)
    x, y, z = location[0]
    h, w, l = dims[0]
    ry = float(rotation_y[0])
    alpha = float(normalize_angle(ry - math.atan2(x, z)))
    x1, y1, x2, y2 = project_box_to_image(box, calib)
    fields = [cls, "0.00", "0", f"{alpha:.6f}", f"{x1:.2f}", f"{y1:.2f}", f"{x2:.2f}", f"{y2:.2f}",
              f"{h:.6f}", f"{w:.6f}", f"{l:.6f}", f"{x:.6f}", f"{y:.6f}", f"{z:.6f}", f"{ry:.6f}"]
    if score is not None:
        fields.append(f"{score:.6f}")
    return " ".join(fields)


def write_kitti_results(path: str, cls: str, boxes, scores: Sequence[float], calib: Calibration) -> int:
    """
    写出一帧检测结果

    Returns:
        写出的行数
    """
    b = as_box_array(boxes)
    with open(path, "w", encoding="utf-8") as f:
        for box, score in zip(b, scores):
            f.write(format_kitti_line(cls, box, float(score), calib) + "\n")
    return b.shape[0]


def read_kitti_results(path: str, calib: Calibration) -> LabelSet:
    """读取检测结果文件（带 score 的 label_2 格式）"""
    return load_labels(path, calib)
