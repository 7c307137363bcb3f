"""
后处理与评估
网络输出解码为检测框、旋转框 NMS、KITTI 协议的插值平均精度，以及 PLY 导出
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from box_geometry import BOX_EDGES, Box3D, as_box_array, bev_iou_matrix, box_corners_3d, iou_3d_matrix
from config import ClassConfig, DefaultConfig, EvalSettings, SupportedOptions
from io_kitti import LabelRecord, LabelSet
from nn_kernels import functional as F
from targets_loss import AnchorGrid, decode_residuals, flatten_regression, flatten_scores

logger = logging.getLogger(__name__)

# 不做难度过滤的评估档，用于合成数据
ALL_DIFFICULTY = "all"


@dataclass
class Detection:
    """单个检测结果"""

    box: Box3D
    score: float
    cls: str = "Car"


@dataclass
class EvalConfig:
    """评估配置：类别 IoU 阈值、难度划分、IoU 模式与插值点数"""

    cls: str = "Car"
    iou_threshold: float = DefaultConfig.CAR_EVAL_IOU
    difficulty_filters: Dict[str, Tuple[float, int, float]] = field(
        default_factory=lambda: dict(DefaultConfig.DIFFICULTY_FILTERS))
    mode: str = "bev"
    interpolation: int = 11

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"IoU 阈值需在 (0, 1] 内: {self.iou_threshold}")
        if self.mode not in SupportedOptions.EVAL_MODES:
            raise ValueError(f"未知的评估模式: {self.mode}")
        if self.interpolation not in SupportedOptions.INTERPOLATION_POINTS:
            raise ValueError(f"插值点数只支持 {SupportedOptions.INTERPOLATION_POINTS}")

    @classmethod
    def from_settings(cls, class_config: ClassConfig, settings: EvalSettings) -> "EvalConfig":
        return cls(cls=class_config.kitti_name, iou_threshold=class_config.eval_iou,
                   mode=settings.mode, interpolation=settings.interpolation)


@dataclass
class EvalReport:
    """各难度的 AP 与 PR 曲线"""

    ap: Dict[str, float] = field(default_factory=dict)
    curves: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    num_gt: Dict[str, int] = field(default_factory=dict)

    def table(self) -> str:
        lines = [f"{'难度':<10}{'AP':>10}{'真值数':>10}"]
        for name, value in self.ap.items():
            lines.append(f"{name:<10}{value:>10.4f}{self.num_gt.get(name, 0):>10d}")
        return "\n".join(lines)


def decode_detections(score_logits: np.ndarray, reg_map: np.ndarray, grid: AnchorGrid,
                      score_thresh: float = DefaultConfig.SCORE_THRESHOLD, head: str = "sigmoid",
                      cls: str = "Car") -> List[Detection]:
    """
    把单帧的两张输出图解码为检测框

    Args:
        score_logits: (A 或 2A, H, W) 或带 batch 维的 (1, ...)
        reg_map: (7A, H, W) 或 (1, 7A, H, W)
        grid: 锚框网格
        score_thresh: 正类概率阈值（含）
        head: sigmoid 或 softmax2
        cls: 类别名

    Returns:
        按锚框顺序排列的检测
    """
    if score_logits.ndim == 3:
        score_logits, reg_map = score_logits[None], reg_map[None]
    flat = flatten_scores(score_logits.astype(np.float64), head)[0]
    probs = F.sigmoid(flat) if head == "sigmoid" else F.softmax2(flat, axis=-1)[:, 1]
    regs = flatten_regression(reg_map.astype(np.float64))[0]
    if probs.shape[0] != grid.num_anchors:
        raise ValueError(f"输出图锚框数 {probs.shape[0]} 与网格 {grid.num_anchors} 不一致")
    keep = np.nonzero(probs >= score_thresh)[0]
    boxes = decode_residuals(regs[keep], grid.boxes[keep])
    return [Detection(Box3D(*map(float, box)), float(probs[i]), cls) for i, box in zip(keep, boxes)]


def nms_bev(dets: Sequence[Detection], iou_thresh: float = DefaultConfig.NMS_IOU_THRESHOLD) -> List[Detection]:
    """
    按分数降序的贪心 NMS，BEV 旋转框 IoU > iou_thresh 的低分框被抑制；同分时先出现者优先

    Args:
        dets: 检测列表
        iou_thresh: 抑制阈值

    Returns:
        保留的检测（分数降序）
    """
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    iou = bev_iou_matrix([dets[i].box for i in order], [dets[i].box for i in order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        keep.append(order[rank])
        suppressed[rank + 1:] |= iou[rank, rank + 1:] > iou_thresh
    return [dets[i] for i in keep]


def passes_difficulty(record: LabelRecord, limits: Tuple[float, int, float]) -> bool:
    """KITTI 难度：2D 框高度下限、遮挡等级上限、截断比例上限"""
    min_height, max_occlusion, max_truncation = limits
    return (record.bbox_height >= min_height and record.occlusion <= max_occlusion
            and record.truncation <= max_truncation)


def _overlap(a: np.ndarray, b: np.ndarray, mode: str) -> np.ndarray:
    return iou_3d_matrix(a, b) if mode == "3d" else bev_iou_matrix(a, b)


def _match_frame(dets: Sequence[Detection], valid: np.ndarray, ignored: np.ndarray,
                 config: EvalConfig) -> List[Tuple[float, bool]]:
    """
    单帧贪心匹配：检测按分数降序依次匹配 IoU 最高且未被占用的有效真值；
    与被忽略真值（难度不符或 DontCare）匹配的检测既不算 TP 也不算 FP

    Returns:
        [(score, is_tp)]，被忽略的检测不在其中
    """
    if not dets:
        return []
    order = np.argsort(-np.array([d.score for d in dets]), kind="stable")
    det_boxes = as_box_array([dets[i].box for i in order])
    iou_valid = _overlap(det_boxes, valid, config.mode)
    iou_ignored = _overlap(det_boxes, ignored, config.mode)
    taken = np.zeros(valid.shape[0], dtype=bool)
    result = []
    for rank, idx in enumerate(order):
        score = dets[idx].score
        if valid.shape[0]:
            candidates = np.where(taken, -1.0, iou_valid[rank])
            best = int(np.argmax(candidates))
            if candidates[best] >= config.iou_threshold:
                taken[best] = True
                result.append((score, True))
                continue
        if ignored.shape[0] and iou_ignored[rank].max() >= config.iou_threshold:
            continue
        result.append((score, False))
    return result


def precision_recall(matches: Sequence[Tuple[float, bool]], num_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    累计精度与召回，只在每组相同分数的末尾取值，因此同分检测的排列不影响结果

    Returns:
        (recall, precision)
    """
    if not matches or num_gt == 0:
        return np.zeros(0), np.zeros(0)
    scores = np.array([m[0] for m in matches])
    tps = np.array([m[1] for m in matches], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    cum_tp = np.cumsum(tps)
    cum_det = np.arange(1, len(tps) + 1)
    group_end = np.append(scores[1:] != scores[:-1], True)
    recall = cum_tp[group_end] / num_gt
    precision = cum_tp[group_end] / cum_det[group_end]
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, points: int = 11) -> float:
    """
    插值 AP：11 点在 {0, 0.1, ..., 1} 上，40 点在 {1/40, ..., 1} 上，
    每个召回点取召回率不低于它的最大精度

    Args:
        recall: 召回率
        precision: 精度
        points: 11 或 40

    Returns:
        AP
    """
    if points == 11:
        samples = np.linspace(0.0, 1.0, 11)
    elif points == 40:
        samples = np.linspace(1.0 / 40, 1.0, 40)
    else:
        raise ValueError(f"插值点数只支持 11 或 40: {points}")
    total = 0.0
    for r in samples:
        reach = precision[recall >= r - 1e-12]
        total += float(reach.max()) if reach.size else 0.0
    return total / len(samples)


def average_precision(dets_per_frame: Sequence[Sequence[Detection]], gts_per_frame: Sequence[LabelSet],
                      eval_config: EvalConfig, difficulties: Optional[Sequence[str]] = None) -> EvalReport:
    """
    KITTI 协议的平均精度

    Args:
        dets_per_frame: 每帧的检测
        gts_per_frame: 每帧的真值（含 DontCare）
        eval_config: 评估配置
        difficulties: 要评估的难度，默认 easy/moderate/hard；"all" 不做难度过滤

    Returns:
        EvalReport
    """
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError(f"检测帧数 {len(dets_per_frame)} 与真值帧数 {len(gts_per_frame)} 不一致")
    names = list(difficulties) if difficulties is not None else list(eval_config.difficulty_filters)
    report = EvalReport()
    for name in names:
        limits = None if name == ALL_DIFFICULTY else eval_config.difficulty_filters[name]
        matches: List[Tuple[float, bool]] = []
        num_gt = 0
        for dets, labels in zip(dets_per_frame, gts_per_frame):
            own = [d for d in dets if d.cls == eval_config.cls]
            valid, ignored = [], [r.box for r in labels.dont_care]
            for record in labels.records:
                if record.cls != eval_config.cls:
                    continue
                if limits is None or passes_difficulty(record, limits):
                    valid.append(record.box)
                else:
                    ignored.append(record.box)
            num_gt += len(valid)
            matches.extend(_match_frame(own, as_box_array(valid), as_box_array(ignored), eval_config))
        recall, precision = precision_recall(matches, num_gt)
        report.ap[name] = interpolated_ap(recall, precision, eval_config.interpolation) if num_gt else 0.0
        report.curves[name] = (recall, precision)
        report.num_gt[name] = num_gt
        if num_gt == 0:
            logger.warning(f"难度 {name} 下没有 {eval_config.cls} 真值，AP 记为 0")
    return report


def labels_from_boxes(boxes, cls: str = "Car") -> LabelSet:
    """把裸框数组包装为 LabelSet（无 2D 信息，只适合 "all" 难度）"""
    result = LabelSet()
    for box in as_box_array(boxes):
        record = LabelRecord(cls=cls, box=Box3D(*map(float, box)))
        result.boxes.append(record.box)
        result.classes.append(cls)
        result.records.append(record)
    return result


def export_ply(path: str, points: np.ndarray, boxes=(), box_colors: Optional[Sequence[Tuple[int, int, int]]] = None) -> None:
    """
    导出带颜色的 ASCII PLY：点云为灰色，框以 12 条边的线框表示

    Args:
        path: 输出文件
        points: (N, >=3)
        boxes: (B, 7)
        box_colors: 每个框的 RGB，默认绿色
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        pts = np.zeros((0, 3))
    corners = box_corners_3d(boxes)
    colors = list(box_colors) if box_colors is not None else [(0, 255, 0)] * corners.shape[0]
    num_vertices = pts.shape[0] + 8 * corners.shape[0]
    num_edges = len(BOX_EDGES) * corners.shape[0]
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {num_vertices}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write(f"element edge {num_edges}\n")
        f.write("property int vertex1\nproperty int vertex2\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for x, y, z in pts[:, :3]:
            f.write(f"{x:.4f} {y:.4f} {z:.4f} 160 160 160\n")
        for b, box in enumerate(corners):
            r, g, bl = colors[b]
            for x, y, z in box:
                f.write(f"{x:.4f} {y:.4f} {z:.4f} {r} {g} {bl}\n")
        for b in range(corners.shape[0]):
            base = pts.shape[0] + 8 * b
            r, g, bl = colors[b]
            for i, j in BOX_EDGES:
                f.write(f"{base + i} {base + j} {r} {g} {bl}\n")
    logger.debug(f"PLY 已导出: {path}")
