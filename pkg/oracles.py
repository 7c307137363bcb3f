"""
参考实现
逐元素循环写成的慢速版本，只用于测试与自检时和快速实现对照
"""

import math
import itertools
from typing import Dict, List, Sequence, Tuple

import numpy as np

from box_geometry import box_corners_bev, normalize_angle
from config import VoxelConfig


def naive_voxelize(points: np.ndarray, config: VoxelConfig,
                   permutation: Sequence[int]) -> Tuple[List[Tuple[int, int, int]], Dict[Tuple[int, int, int], List[int]]]:
    """
    用字典分组的体素化：按 permutation 顺序逐点处理，先到先得

    Returns:
        (体素首次出现顺序, 体素坐标 -> 保留点下标列表)
    """
    z_min, _, y_min, _, x_min, _ = config.range
    vz, vy, vx = config.voxel_size
    z_max, y_max, x_max = config.range[1], config.range[3], config.range[5]
    dims = (int(round((z_max - z_min) / vz)), int(round((y_max - y_min) / vy)), int(round((x_max - x_min) / vx)))
    order: List[Tuple[int, int, int]] = []
    groups: Dict[Tuple[int, int, int], List[int]] = {}
    for i in permutation:
        x, y, z = (float(v) for v in points[i, :3])
        if not (z_min <= z < z_max and y_min <= y < y_max and x_min <= x < x_max):
            continue
        key = (min(int(math.floor((z - z_min) / vz)), dims[0] - 1),
               min(int(math.floor((y - y_min) / vy)), dims[1] - 1),
               min(int(math.floor((x - x_min) / vx)), dims[2] - 1))
        if key not in groups:
            if len(order) == config.max_voxels:
                continue
            groups[key] = []
            order.append(key)
        if len(groups[key]) < config.max_points:
            groups[key].append(int(i))
    return order, groups


def naive_conv(x: np.ndarray, weight: np.ndarray, bias, stride: Sequence[int], padding: Sequence[int]) -> np.ndarray:
    """嵌套循环互相关，x: (B, Cin, *S)，weight: (Cout, Cin, *K)"""
    ndim = x.ndim - 2
    pad = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.astype(np.float64), pad)
    kernel = weight.shape[2:]
    out_shape = [(xp.shape[2 + i] - kernel[i]) // stride[i] + 1 for i in range(ndim)]
    out = np.zeros((x.shape[0], weight.shape[0], *out_shape))
    for b, o in itertools.product(range(x.shape[0]), range(weight.shape[0])):
        for pos in itertools.product(*[range(n) for n in out_shape]):
            window = tuple(slice(pos[i] * stride[i], pos[i] * stride[i] + kernel[i]) for i in range(ndim))
            out[(b, o) + pos] = np.sum(xp[(b, slice(None)) + window] * weight[o])
            if bias is not None:
                out[(b, o) + pos] += bias[o]
    return out


def naive_deconv(x: np.ndarray, weight: np.ndarray, bias, stride: Sequence[int], padding: Sequence[int]) -> np.ndarray:
    """逐输入位置散射的转置卷积，weight: (Cin, Cout, *K)"""
    ndim = x.ndim - 2
    kernel = weight.shape[2:]
    full = [(x.shape[2 + i] - 1) * stride[i] + kernel[i] for i in range(ndim)]
    out = np.zeros((x.shape[0], weight.shape[1], *full))
    for b, c in itertools.product(range(x.shape[0]), range(x.shape[1])):
        for pos in itertools.product(*[range(n) for n in x.shape[2:]]):
            window = tuple(slice(pos[i] * stride[i], pos[i] * stride[i] + kernel[i]) for i in range(ndim))
            out[(b, slice(None)) + window] += x[(b, c) + pos] * weight[c]
    crop = tuple(slice(padding[i], full[i] - padding[i]) for i in range(ndim))
    out = out[(slice(None), slice(None)) + crop]
    if bias is not None:
        out += np.reshape(bias, (1, -1) + (1,) * ndim)
    return out


def monte_carlo_bev_iou(a, b, rng: np.random.Generator, samples: int = 200_000) -> float:
    """在两框外接矩形内均匀撒点估计 BEV IoU"""
    corners = box_corners_bev(np.stack([np.asarray(a, float), np.asarray(b, float)]))
    lo = corners.reshape(-1, 2).min(axis=0)
    hi = corners.reshape(-1, 2).max(axis=0)
    pts = rng.uniform(lo, hi, size=(samples, 2))

    def inside(box):
        local = pts - np.asarray(box[:2], float)
        c, s = math.cos(box[6]), math.sin(box[6])
        u = c * local[:, 0] + s * local[:, 1]
        v = -s * local[:, 0] + c * local[:, 1]
        return (np.abs(u) <= box[3] / 2) & (np.abs(v) <= box[4] / 2)

    in_a, in_b = inside(a), inside(b)
    union = np.count_nonzero(in_a | in_b)
    return float(np.count_nonzero(in_a & in_b) / union) if union else 0.0


def exhaustive_match(iou: np.ndarray, pos_thr: float, neg_thr: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    逐锚框、逐真值双重循环的匹配

    Args:
        iou: (N_anchor, N_gt) 的 BEV IoU

    Returns:
        (labels, gt_index)
    """
    n_anchor, n_gt = iou.shape
    labels = np.full(n_anchor, -1, dtype=np.int8)
    gt_index = np.full(n_anchor, -1, dtype=np.int64)
    for i in range(n_anchor):
        best, best_j = 0.0, -1
        for j in range(n_gt):
            if iou[i, j] > best:
                best, best_j = iou[i, j], j
        if best > pos_thr:
            labels[i], gt_index[i] = 1, best_j
        elif best < neg_thr:
            labels[i] = 0
    for j in range(n_gt):
        best, best_i = 0.0, -1
        for i in range(n_anchor):
            if iou[i, j] > best:
                best, best_i = iou[i, j], i
        if best_i >= 0 and labels[best_i] != 1:
            labels[best_i] = 1
            row = iou[best_i]
            gt_index[best_i] = int(np.argmax(row))
    return labels, gt_index


def termwise_loss(probs: np.ndarray, labels: np.ndarray, reg: np.ndarray, reg_targets: np.ndarray,
                  alpha: float, beta: float, threshold: float = 1.0) -> float:
    """
    按定义逐项累加的总损失（单帧或已展平的批次）

    Args:
        probs: (N,) 正类概率
        labels: (N,) 1/0/-1
        reg: (N, 7) 预测残差
        reg_targets: (N, 7) 目标残差
    """
    pos_terms, neg_terms, reg_terms = [], [], []
    for p, label, u, u_star in zip(probs, labels, reg, reg_targets):
        if label == 1:
            pos_terms.append(-math.log(p))
            s = 0.0
            for a, b in zip(u, u_star):
                d = abs(a - b)
                s += 0.5 * d * d / threshold if d < threshold else d - 0.5 * threshold
            reg_terms.append(s)
        elif label == 0:
            neg_terms.append(-math.log(1.0 - p))
    n_pos = len(pos_terms)
    n_neg = max(len(neg_terms), 1)
    return alpha * sum(pos_terms) / n_pos + beta * sum(neg_terms) / n_neg + sum(reg_terms) / n_pos


def naive_nms(boxes: np.ndarray, scores: np.ndarray, iou_fn, iou_thresh: float) -> List[int]:
    """O(n²) 贪心 NMS，返回保留下标"""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept: List[int] = []
    for i in order:
        if all(iou_fn(boxes[i], boxes[k]) <= iou_thresh for k in kept):
            kept.append(i)
    return kept


def scalar_decode(u: Sequence[float], anchor: Sequence[float]) -> Tuple[float, ...]:
    """单框残差解码"""
    xa, ya, za, la, wa, ha, ta = (float(v) for v in anchor)
    d = math.sqrt(la * la + wa * wa)
    return (
        u[0] * d + xa,
        u[1] * d + ya,
        u[2] * ha + za,
        math.exp(u[3]) * la,
        math.exp(u[4]) * wa,
        math.exp(u[5]) * ha,
        float(normalize_angle(u[6] + ta)),
    )
