"""
锚框与训练目标
锚框网格生成、BEV 交并比匹配、残差编码/解码，以及加权的分类 + 回归损失
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from box_geometry import Box3D, as_box_array, bev_iou, bev_iou_matrix, normalize_angle
from config import ClassConfig, DefaultConfig
from errors import InvariantError, ShapeError
from nn_kernels import functional as F

logger = logging.getLogger(__name__)

POSITIVE, NEGATIVE, DONT_CARE = 1, 0, -1

__all__ = [
    "AnchorGrid", "MatchLabels", "TrainTargets", "LossResult",
    "make_anchor_grid", "bev_iou", "match_anchors",
    "encode_residual", "decode_residual", "encode_residuals", "decode_residuals",
    "build_targets", "total_loss", "flatten_regression", "flatten_scores",
]


@dataclass
class AnchorGrid:
    """
    锚框网格
    boxes 按 (h, w, a) 顺序展平为 (H·W·A, 7)；h 沿 Y，w 沿 X
    """

    boxes: np.ndarray
    shape: Tuple[int, int, int]
    stride: Tuple[float, float]

    @property
    def num_anchors(self) -> int:
        return self.boxes.shape[0]

    @property
    def diagonal(self) -> np.ndarray:
        """底面对角线 d^a"""
        return np.hypot(self.boxes[:, 3], self.boxes[:, 4])


@dataclass
class MatchLabels:
    """
    单帧匹配结果
    labels: 1 正、0 负、-1 不关心；gt_index: 正样本对应的真值下标，其余为 -1；targets: 正样本的 u*
    """

    labels: np.ndarray
    gt_index: np.ndarray
    targets: np.ndarray
    max_iou: np.ndarray
    unmatched_gts: List[int] = field(default_factory=list)

    @property
    def num_pos(self) -> int:
        return int((self.labels == POSITIVE).sum())

    @property
    def num_neg(self) -> int:
        return int((self.labels == NEGATIVE).sum())

    @property
    def positive(self) -> np.ndarray:
        return self.labels == POSITIVE


@dataclass
class TrainTargets:
    """一个批次的训练目标，按帧堆叠"""

    labels: np.ndarray
    reg_targets: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.labels.shape[0]

    def frame_num_pos(self) -> np.ndarray:
        return (self.labels == POSITIVE).sum(axis=1)


@dataclass
class LossResult:
    """损失值、各分项与对两张输出图的梯度"""

    total: float
    cls_pos: float
    cls_neg: float
    reg: float
    grad_score: np.ndarray
    grad_reg: np.ndarray
    num_pos: int
    num_neg: int
    skipped_frames: int = 0

    def components(self) -> dict:
        return {"loss": self.total, "cls_pos": self.cls_pos, "cls_neg": self.cls_neg, "reg": self.reg}


def make_anchor_grid(class_config: ClassConfig, bev_dims: Tuple[int, int],
                     range_zyx: Sequence[float] = DefaultConfig.CAR_RANGE) -> AnchorGrid:
    """
    在检测头分辨率上铺设锚框，中心位于各格子中心

    Args:
        class_config: 类别配置（锚框尺寸、高度、旋转角）
        bev_dims: 检测头分辨率 (H, W)
        range_zyx: 检测范围

    Returns:
        AnchorGrid
    """
    rows, cols = int(bev_dims[0]), int(bev_dims[1])
    if rows < 1 or cols < 1:
        raise ShapeError(f"锚框网格尺寸必须为正: {bev_dims}")
    _, _, y_min, y_max, x_min, x_max = range_zyx
    stride_y = (y_max - y_min) / rows
    stride_x = (x_max - x_min) / cols
    rotations = np.asarray(class_config.anchor_rotations, dtype=np.float64)
    ys = y_min + (np.arange(rows) + 0.5) * stride_y
    xs = x_min + (np.arange(cols) + 0.5) * stride_x
    grid_y, grid_x, grid_r = np.meshgrid(ys, xs, rotations, indexing="ij")
    count = grid_y.size
    length, width, height = class_config.anchor_size
    boxes = np.empty((count, 7), dtype=np.float64)
    boxes[:, 0] = grid_x.reshape(-1)
    boxes[:, 1] = grid_y.reshape(-1)
    boxes[:, 2] = class_config.anchor_z
    boxes[:, 3] = length
    boxes[:, 4] = width
    boxes[:, 5] = height
    boxes[:, 6] = grid_r.reshape(-1)
    return AnchorGrid(boxes=boxes, shape=(rows, cols, rotations.size), stride=(stride_y, stride_x))


def encode_residuals(gts: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """
    批量残差编码
    Δx, Δy 除以 d^a，Δz 除以 h^a，尺寸取对数比，Δθ 直接相减（不取模）

    Args:
        gts: (N, 7)
        anchors: (N, 7)

    Returns:
        (N, 7)
    """
    g = as_box_array(gts)
    a = as_box_array(anchors)
    if np.any(g[:, 3:6] <= 0):
        raise InvariantError("真值框尺寸必须为正")
    diag = np.hypot(a[:, 3], a[:, 4])
    u = np.empty_like(g)
    u[:, 0] = (g[:, 0] - a[:, 0]) / diag
    u[:, 1] = (g[:, 1] - a[:, 1]) / diag
    u[:, 2] = (g[:, 2] - a[:, 2]) / a[:, 5]
    u[:, 3:6] = np.log(g[:, 3:6] / a[:, 3:6])
    u[:, 6] = g[:, 6] - a[:, 6]
    return u


def decode_residuals(u: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """encode_residuals 的逆，θ 规范化到 [-pi, pi)"""
    r = np.asarray(u, dtype=np.float64).reshape(-1, 7)
    a = as_box_array(anchors)
    diag = np.hypot(a[:, 3], a[:, 4])
    boxes = np.empty_like(r)
    boxes[:, 0] = r[:, 0] * diag + a[:, 0]
    boxes[:, 1] = r[:, 1] * diag + a[:, 1]
    boxes[:, 2] = r[:, 2] * a[:, 5] + a[:, 2]
    boxes[:, 3:6] = np.exp(r[:, 3:6]) * a[:, 3:6]
    boxes[:, 6] = normalize_angle(r[:, 6] + a[:, 6])
    return boxes


def encode_residual(gt, anchor) -> np.ndarray:
    """单个真值框相对锚框的 u* (7,)"""
    return encode_residuals(gt, anchor)[0]


def decode_residual(u, anchor) -> Box3D:
    """由残差和锚框恢复框"""
    return Box3D(*(float(v) for v in decode_residuals(u, anchor)[0]))


def match_anchors(grid: AnchorGrid, gts, class_config: ClassConfig) -> MatchLabels:
    """
    锚框匹配

    最大 IoU > pos_iou 为正，< neg_iou 为负，其余不关心；每个真值框 IoU 最大的锚框
    （并列取下标最小者）强制为正，即使其 IoU 低于 neg_iou。正样本对应 IoU 最高的真值框，并列取下标最小者。

    与所有锚框 IoU 均为 0 的真值框不强制任何锚框，记入 unmatched_gts 并打警告日志。

    Args:
        grid: 锚框网格
        gts: (G, 7) 真值框
        class_config: 阈值配置

    Returns:
        MatchLabels
    """
    anchors = grid.boxes
    count = anchors.shape[0]
    boxes = as_box_array(gts)
    labels = np.full(count, NEGATIVE, dtype=np.int8)
    gt_index = np.full(count, -1, dtype=np.int64)
    targets = np.zeros((count, 7), dtype=np.float64)
    if boxes.shape[0] == 0:
        return MatchLabels(labels, gt_index, targets, np.zeros(count))

    iou = bev_iou_matrix(anchors, boxes)
    best_gt = np.argmax(iou, axis=1)
    max_iou = iou[np.arange(count), best_gt]
    labels[max_iou >= class_config.neg_iou] = DONT_CARE
    labels[max_iou > class_config.pos_iou] = POSITIVE

    unmatched = []
    best_anchor = np.argmax(iou, axis=0)
    for g, a in enumerate(best_anchor):
        if iou[a, g] > 0.0:
            labels[a] = POSITIVE
        else:
            unmatched.append(g)
    if unmatched:
        logger.warning(f"{len(unmatched)} 个真值框与任何锚框都不重叠: {unmatched}")

    pos = labels == POSITIVE
    gt_index[pos] = best_gt[pos]
    if pos.any():
        targets[pos] = encode_residuals(boxes[best_gt[pos]], anchors[pos])
    return MatchLabels(labels, gt_index, targets, max_iou, unmatched)


def build_targets(matches: Sequence[MatchLabels]) -> TrainTargets:
    """把各帧的匹配结果堆叠为批次目标"""
    return TrainTargets(
        labels=np.stack([m.labels for m in matches]),
        reg_targets=np.stack([m.targets for m in matches]),
    )


def flatten_scores(score_logits: np.ndarray, head: str = "sigmoid") -> np.ndarray:
    """
    分类头输出按 (h, w, a) 展平

    Returns:
        sigmoid: (B, N)；softmax2: (B, N, 2)
    """
    b, c, h, w = score_logits.shape
    if head == "sigmoid":
        return score_logits.transpose(0, 2, 3, 1).reshape(b, h * w * c)
    pairs = score_logits.reshape(b, c // 2, 2, h, w).transpose(0, 3, 4, 1, 2)
    return pairs.reshape(b, h * w * (c // 2), 2)


def unflatten_scores(flat: np.ndarray, shape: Tuple[int, int, int, int], head: str = "sigmoid") -> np.ndarray:
    b, c, h, w = shape
    if head == "sigmoid":
        return flat.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    return flat.reshape(b, h, w, c // 2, 2).transpose(0, 3, 4, 1, 2).reshape(b, c, h, w)


def flatten_regression(reg_map: np.ndarray) -> np.ndarray:
    """(B, 7A, H, W)，通道 a·7 + j → (B, H·W·A, 7)"""
    b, c, h, w = reg_map.shape
    anchors = c // 7
    return reg_map.reshape(b, anchors, 7, h, w).transpose(0, 3, 4, 1, 2).reshape(b, h * w * anchors, 7)


def unflatten_regression(flat: np.ndarray, shape: Tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    return flat.reshape(b, h, w, c // 7, 7).transpose(0, 3, 4, 1, 2).reshape(b, c, h, w)


def _classification_terms(flat_scores: np.ndarray, target: float, head: str) -> Tuple[np.ndarray, np.ndarray]:
    """逐锚框交叉熵及其对 logit 的梯度"""
    if head == "sigmoid":
        return (F.bce_with_logits(flat_scores, target), F.bce_with_logits_grad(flat_scores, target))
    lse = np.logaddexp(flat_scores[..., 0], flat_scores[..., 1])
    probs = F.softmax2(flat_scores, axis=-1)
    onehot = np.array([1.0 - target, target])
    loss = lse - flat_scores[..., 1] * target - flat_scores[..., 0] * (1.0 - target)
    return loss, probs - onehot


def total_loss(score_logits: np.ndarray, reg_map: np.ndarray, targets: TrainTargets, head: str = "sigmoid",
               alpha: float = DefaultConfig.LOSS_ALPHA, beta: float = DefaultConfig.LOSS_BETA,
               threshold: float = DefaultConfig.SMOOTH_L1_THRESHOLD) -> LossResult:
    """
    L = α/N_pos Σ L_cls(p_pos, 1) + β/N_neg Σ L_cls(p_neg, 0) + 1/N_pos Σ L_reg(u, u*)

    N_pos、N_neg 为整个批次（跳过没有正样本的帧后）的计数；不关心的锚框不参与。

    Args:
        score_logits: 分类头输出 (B, A 或 2A, H, W)
        reg_map: 回归头输出 (B, 7A, H, W)
        targets: 批次目标
        head: sigmoid 或 softmax2
        alpha: 正样本分类权重
        beta: 负样本分类权重
        threshold: SmoothL1 阈值

    Returns:
        LossResult，梯度形状与两张输出图一致
    """
    scores = flatten_scores(score_logits.astype(np.float64), head)
    regs = flatten_regression(reg_map.astype(np.float64))
    if scores.shape[:2] != targets.labels.shape or regs.shape[:2] != targets.labels.shape:
        raise ShapeError(f"输出图锚框数 {scores.shape[:2]} 与目标 {targets.labels.shape} 不一致")
    frame_ok = targets.frame_num_pos() > 0
    skipped = int((~frame_ok).sum())
    pos = (targets.labels == POSITIVE) & frame_ok[:, None]
    neg = (targets.labels == NEGATIVE) & frame_ok[:, None]
    num_pos, num_neg = int(pos.sum()), int(neg.sum())
    if num_pos == 0:
        raise InvariantError("批次中没有正样本锚框，无法计算损失")

    loss_pos, grad_pos = _classification_terms(scores, 1.0, head)
    loss_neg, grad_neg = _classification_terms(scores, 0.0, head)
    cls_pos = alpha * float(loss_pos[pos].sum()) / num_pos
    cls_neg = beta * float(loss_neg[neg].sum()) / num_neg if num_neg else 0.0

    mask_shape = pos.shape + (1,) * (scores.ndim - 2)
    grad_scores = (alpha / num_pos) * grad_pos * pos.reshape(mask_shape)
    if num_neg:
        grad_scores = grad_scores + (beta / num_neg) * grad_neg * neg.reshape(mask_shape)

    reg_values = F.smooth_l1(regs, targets.reg_targets, threshold)
    reg = float(reg_values[pos].sum()) / num_pos
    grad_regs = F.smooth_l1_grad(regs, targets.reg_targets, threshold) * (pos[..., None] / num_pos)

    if skipped:
        logger.debug(f"跳过 {skipped} 个没有正样本的帧")
    return LossResult(
        total=cls_pos + cls_neg + reg,
        cls_pos=cls_pos,
        cls_neg=cls_neg,
        reg=reg,
        grad_score=unflatten_scores(grad_scores, score_logits.shape, head).astype(score_logits.dtype),
        grad_reg=unflatten_regression(grad_regs, reg_map.shape).astype(reg_map.dtype),
        num_pos=num_pos,
        num_neg=num_neg,
        skipped_frames=skipped,
    )
