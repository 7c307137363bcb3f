"""
三维框几何
7 自由度框 (x_c, y_c, z_c, l, w, h, theta)，theta 为绕 Z 轴的偏航角；
BEV 交并比用凸多边形裁剪（Sutherland-Hodgman）加鞋带公式计算
"""

import math
import logging
from typing import NamedTuple, Sequence, Union

import numpy as np

from accel import njit

logger = logging.getLogger(__name__)

# 碰撞判定的最小重叠面积 (m^2)，低于该值视为贴边而非相交
COLLISION_AREA_EPS = 1e-9


class Box3D(NamedTuple):
    """7 自由度三维框，中心坐标与尺寸单位为米，theta 单位为弧度"""

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float


BoxLike = Union[Box3D, Sequence[float], np.ndarray]


def normalize_angle(theta):
    """把角度规范化到 [-pi, pi)"""
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def as_box_array(boxes) -> np.ndarray:
    """
    将框或框列表转为 (N, 7) float64 数组

    Args:
        boxes: Box3D、长度 7 的序列、或 (N, 7) 数组

    Returns:
        (N, 7) 数组
    """
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 7), dtype=np.float64)
    return arr.reshape(-1, 7)


def box_corners_bev(boxes) -> np.ndarray:
    """
    计算 BEV 下的四个角点（逆时针）

    Args:
        boxes: (N, 7) 或单个框

    Returns:
        (N, 4, 2) 角点数组
    """
    b = as_box_array(boxes)
    half_l = b[:, 3:4] / 2.0
    half_w = b[:, 4:5] / 2.0
    local_x = np.concatenate([half_l, -half_l, -half_l, half_l], axis=1)
    local_y = np.concatenate([half_w, half_w, -half_w, -half_w], axis=1)
    cos_t = np.cos(b[:, 6:7])
    sin_t = np.sin(b[:, 6:7])
    corners = np.empty((b.shape[0], 4, 2), dtype=np.float64)
    corners[:, :, 0] = b[:, 0:1] + cos_t * local_x - sin_t * local_y
    corners[:, :, 1] = b[:, 1:2] + sin_t * local_x + cos_t * local_y
    return corners


@njit(cache=True)
def _convex_clip_area(subject, clip):
    """两个逆时针凸四边形的交集面积"""
    poly = np.empty((16, 2))
    out = np.empty((16, 2))
    n = 4
    for i in range(4):
        poly[i, 0] = subject[i, 0]
        poly[i, 1] = subject[i, 1]
    for e in range(4):
        ax = clip[e, 0]
        ay = clip[e, 1]
        bx = clip[(e + 1) % 4, 0]
        by = clip[(e + 1) % 4, 1]
        m = 0
        for i in range(n):
            px = poly[i, 0]
            py = poly[i, 1]
            qx = poly[(i + 1) % n, 0]
            qy = poly[(i + 1) % n, 1]
            sp = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            sq = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
            if sp >= 0.0:
                out[m, 0] = px
                out[m, 1] = py
                m += 1
                if sq < 0.0:
                    t = sp / (sp - sq)
                    out[m, 0] = px + t * (qx - px)
                    out[m, 1] = py + t * (qy - py)
                    m += 1
            elif sq >= 0.0:
                t = sp / (sp - sq)
                out[m, 0] = px + t * (qx - px)
                out[m, 1] = py + t * (qy - py)
                m += 1
        if m == 0:
            return 0.0
        for i in range(m):
            poly[i, 0] = out[i, 0]
            poly[i, 1] = out[i, 1]
        n = m
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return abs(area) * 0.5


@njit(cache=True)
def _pairwise_bev(corners_a, corners_b, area_a, area_b, idx_a, idx_b, out_inter, out_iou):
    for k in range(idx_a.shape[0]):
        i = idx_a[k]
        j = idx_b[k]
        if area_a[i] <= 0.0 or area_b[j] <= 0.0:
            out_inter[k] = 0.0
            out_iou[k] = 0.0
            continue
        inter = _convex_clip_area(corners_a[i], corners_b[j])
        union = area_a[i] + area_b[j] - inter
        out_inter[k] = inter
        out_iou[k] = inter / union if union > 0.0 else 0.0


def _candidate_pairs(a: np.ndarray, b: np.ndarray):
    """外接圆相交的候选框对，其余框对交集必为零"""
    radius_a = 0.5 * np.hypot(a[:, 3], a[:, 4])
    radius_b = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    reach = radius_a[:, None] + radius_b[None, :]
    return np.nonzero(dx * dx + dy * dy < reach * reach)


def bev_overlap_matrix(boxes_a, boxes_b):
    """
    计算两组框的 BEV 交集面积与交并比矩阵

    Args:
        boxes_a: (N, 7)
        boxes_b: (M, 7)

    Returns:
        (intersection (N, M), iou (N, M))
    """
    a = as_box_array(boxes_a)
    b = as_box_array(boxes_b)
    inter = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    iou = np.zeros_like(inter)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return inter, iou
    idx_a, idx_b = _candidate_pairs(a, b)
    if idx_a.size == 0:
        return inter, iou
    pair_inter = np.zeros(idx_a.size, dtype=np.float64)
    pair_iou = np.zeros(idx_a.size, dtype=np.float64)
    _pairwise_bev(
        box_corners_bev(a), box_corners_bev(b),
        np.clip(a[:, 3], 0.0, None) * np.clip(a[:, 4], 0.0, None),
        np.clip(b[:, 3], 0.0, None) * np.clip(b[:, 4], 0.0, None),
        idx_a.astype(np.int64), idx_b.astype(np.int64), pair_inter, pair_iou,
    )
    inter[idx_a, idx_b] = pair_inter
    iou[idx_a, idx_b] = np.clip(pair_iou, 0.0, 1.0)
    return inter, iou


def bev_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """两组框的 BEV 交并比矩阵"""
    return bev_overlap_matrix(boxes_a, boxes_b)[1]


def bev_iou(a: BoxLike, b: BoxLike) -> float:
    """
    两个框在 X-Y 平面足迹（旋转矩形）的交并比

    Args:
        a: 框 a
        b: 框 b

    Returns:
        [0, 1] 之间的交并比；零面积框返回 0
    """
    return float(bev_iou_matrix(a, b)[0, 0])


def bev_intersection_area(a: BoxLike, b: BoxLike) -> float:
    """两个框 BEV 足迹的交集面积"""
    return float(bev_overlap_matrix(a, b)[0][0, 0])


def iou_3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    """
    三维交并比：BEV 交集面积乘以 Z 向重叠，再除以体积并集

    Args:
        boxes_a: (N, 7)
        boxes_b: (M, 7)

    Returns:
        (N, M) 三维交并比
    """
    a = as_box_array(boxes_a)
    b = as_box_array(boxes_b)
    inter_bev, _ = bev_overlap_matrix(a, b)
    top = np.minimum(a[:, None, 2] + a[:, None, 5] / 2.0, b[None, :, 2] + b[None, :, 5] / 2.0)
    bottom = np.maximum(a[:, None, 2] - a[:, None, 5] / 2.0, b[None, :, 2] - b[None, :, 5] / 2.0)
    inter = inter_bev * np.clip(top - bottom, 0.0, None)
    vol_a = a[:, 3] * a[:, 4] * a[:, 5]
    vol_b = b[:, 3] * b[:, 4] * b[:, 5]
    union = vol_a[:, None] + vol_b[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def iou_3d(a: BoxLike, b: BoxLike) -> float:
    """两个框的三维交并比"""
    return float(iou_3d_matrix(a, b)[0, 0])


def boxes_collide(a: BoxLike, b: BoxLike) -> bool:
    """BEV 足迹重叠面积严格为正即视为碰撞"""
    return bev_intersection_area(a, b) > COLLISION_AREA_EPS


def collision_pairs(boxes) -> np.ndarray:
    """
    找出所有发生碰撞的框对

    Args:
        boxes: (N, 7)

    Returns:
        (P, 2) 下标对，i < j
    """
    b = as_box_array(boxes)
    inter, _ = bev_overlap_matrix(b, b)
    upper = np.triu(inter > COLLISION_AREA_EPS, k=1)
    return np.argwhere(upper)


def points_in_box(points: np.ndarray, box: BoxLike) -> np.ndarray:
    """
    判断点是否位于框内（边界包含在内）

    Args:
        points: (N, >=3) 点坐标
        box: 单个框

    Returns:
        (N,) 布尔掩码
    """
    x, y, z, l, w, h, theta = as_box_array(box)[0]
    pts = np.asarray(points, dtype=np.float64)
    dx = pts[:, 0] - x
    dy = pts[:, 1] - y
    cos_t = math.cos(theta)
    sin_t = math.sin(theta)
    local_x = cos_t * dx + sin_t * dy
    local_y = -sin_t * dx + cos_t * dy
    return (
        (np.abs(local_x) <= l / 2.0)
        & (np.abs(local_y) <= w / 2.0)
        & (np.abs(pts[:, 2] - z) <= h / 2.0)
    )


def box_membership(points: np.ndarray, boxes) -> np.ndarray:
    """
    计算每个框包含的点集 (Omega_i)

    Args:
        points: (N, >=3)
        boxes: (B, 7)

    Returns:
        (B, N) 布尔矩阵
    """
    b = as_box_array(boxes)
    if b.shape[0] == 0:
        return np.zeros((0, len(points)), dtype=bool)
    return np.stack([points_in_box(points, box) for box in b], axis=0)


def rotate_z(xy: np.ndarray, angle: float) -> np.ndarray:
    """绕 Z 轴旋转 (N, 2) 坐标"""
    cos_a = math.cos(angle)
    sin_a = math.sin(angle)
    out = np.empty_like(xy)
    out[:, 0] = cos_a * xy[:, 0] - sin_a * xy[:, 1]
    out[:, 1] = sin_a * xy[:, 0] + cos_a * xy[:, 1]
    return out


def box_corners_3d(boxes) -> np.ndarray:
    """
    计算三维角点：前 4 个为底面（逆时针），后 4 个为对应顶面

    Args:
        boxes: (N, 7)

    Returns:
        (N, 8, 3)
    """
    b = as_box_array(boxes)
    bev = box_corners_bev(b)
    corners = np.empty((b.shape[0], 8, 3), dtype=np.float64)
    corners[:, :4, :2] = bev
    corners[:, 4:, :2] = bev
    corners[:, :4, 2] = (b[:, 2] - b[:, 5] / 2.0)[:, None]
    corners[:, 4:, 2] = (b[:, 2] + b[:, 5] / 2.0)[:, None]
    return corners


# 线框的 12 条边（角点下标）
BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)
