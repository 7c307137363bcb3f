"""
训练与推理
增强 → 裁剪 → 体素化 → 前向 → 损失 → 反向 → SGD 更新；合成/KITTI 数据集；权重保存与断点续训
"""

import os
import csv
import math
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from augment import AugmentedStream, Scene
from box_geometry import as_box_array, boxes_collide, points_in_box
from config import ClassConfig, PipelineConfig, TrainSettings, VoxelConfig
from detector import VoxelNet
from errors import ConfigError, DivergenceError
from io_kitti import (Calibration, LabelSet, PointCloud, crop_to_range, filter_by_image_frustum, load_labels,
                      load_pointcloud, parse_calibration)
from nn_kernels.checkpoint import load_checkpoint, save_checkpoint
from nn_kernels.tensor import Tensor
from postprocess_eval import Detection, decode_detections, labels_from_boxes, nms_bev
from targets_loss import AnchorGrid, MatchLabels, build_targets, make_anchor_grid, match_anchors, total_loss
from voxel_pipeline import VoxelBatch, VoxelBuffers, augment_with_centroid, build_buffers, collate_buffers

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "loss", "cls_pos", "cls_neg", "reg"]
MOMENTUM_PREFIX = "__momentum__."


class SgdOptimizer:
    """随机梯度下降，可选动量：v = m·v + g，p -= lr·v"""

    def __init__(self, params: Dict[str, Tensor], momentum: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in params.items()
        } if momentum > 0 else {}

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def step(self, lr: float) -> None:
        for name, param in self.params.items():
            if param.grad is None:
                continue
            update = param.grad
            if self.momentum > 0:
                velocity = self.velocity[name]
                velocity *= self.momentum
                velocity += update
                update = velocity
            param.data -= (lr * update).astype(param.dtype, copy=False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {f"{MOMENTUM_PREFIX}{name}": v for name, v in self.velocity.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            key = f"{MOMENTUM_PREFIX}{name}"
            if key in state:
                self.velocity[name][...] = state[key]


def learning_rate(epoch: int, settings: TrainSettings) -> float:
    """前 decay_epoch 轮用初始学习率，之后用衰减后的学习率"""
    return settings.learning_rate if epoch < settings.decay_epoch else settings.decayed_learning_rate


def make_synthetic_scene(rng: np.random.Generator, class_config: ClassConfig,
                         range_zyx: Sequence[float], max_boxes: int = 4) -> Scene:
    """
    生成桌面规模的合成场景：1~4 个互不碰撞的框，每个框内 50~300 个靠近表面的点，加地面杂点

    Args:
        rng: 随机数发生器
        class_config: 类别（决定框尺寸与高度）
        range_zyx: 检测范围
        max_boxes: 最多框数

    Returns:
        Scene，真值即生成的框
    """
    _, _, y_min, y_max, x_min, x_max = range_zyx
    length, width, height = class_config.anchor_size
    ground = class_config.anchor_z - height / 2.0
    margin = 0.5 * math.hypot(length, width) * 1.1 + 0.2
    target_boxes = int(rng.integers(1, max_boxes + 1))
    boxes: List[np.ndarray] = []
    for _ in range(100 * target_boxes):
        if len(boxes) == target_boxes:
            break
        size = np.array([length, width, height]) * rng.uniform(0.9, 1.1, size=3)
        center = np.array([
            rng.uniform(x_min + margin, x_max - margin),
            rng.uniform(y_min + margin, y_max - margin),
            ground + size[2] / 2.0,
        ])
        candidate = np.concatenate([center, size, [rng.uniform(-math.pi, math.pi)]])
        if any(boxes_collide(candidate, other) for other in boxes):
            continue
        boxes.append(candidate)

    chunks = []
    for box in boxes:
        count = int(rng.integers(50, 301))
        # 局部坐标：先在收缩后的框内均匀采样，再把一个随机轴推到表面附近
        half = box[3:6] / 2.0 * 0.98
        local = rng.uniform(-1.0, 1.0, size=(count, 3))
        axis = rng.integers(0, 3, size=count)
        local[np.arange(count), axis] = np.sign(local[np.arange(count), axis]) * rng.uniform(0.85, 1.0, size=count)
        local *= half
        cos_t, sin_t = math.cos(box[6]), math.sin(box[6])
        xyz = np.empty_like(local)
        xyz[:, 0] = box[0] + cos_t * local[:, 0] - sin_t * local[:, 1]
        xyz[:, 1] = box[1] + sin_t * local[:, 0] + cos_t * local[:, 1]
        xyz[:, 2] = box[2] + local[:, 2]
        chunks.append(np.hstack([xyz, rng.uniform(0.0, 1.0, size=(count, 1))]))

    clutter_count = int(rng.integers(200, 600))
    clutter = np.column_stack([
        rng.uniform(x_min, x_max, clutter_count),
        rng.uniform(y_min, y_max, clutter_count),
        ground - rng.uniform(0.02, 0.1, clutter_count),
        rng.uniform(0.0, 0.3, clutter_count),
    ])
    chunks.append(clutter)
    points = np.vstack(chunks).astype(np.float32)
    return Scene(cloud=PointCloud(points=points), boxes=as_box_array(boxes),
                 classes=[class_config.kitti_name] * len(boxes))


class SyntheticDataset:
    """N 个合成场景，第 i 个由 default_rng([seed, i]) 生成"""

    def __init__(self, count: int, config: PipelineConfig):
        if count < 1:
            raise ConfigError("合成数据集至少需要 1 个场景")
        self.scenes = [
            make_synthetic_scene(np.random.default_rng([config.seed, i]), config.target, config.voxel.range)
            for i in range(count)
        ]

    def __len__(self) -> int:
        return len(self.scenes)

    def __getitem__(self, index: int) -> Scene:
        return self.scenes[index]

    def label_set(self, index: int) -> LabelSet:
        scene = self.scenes[index]
        return labels_from_boxes(scene.boxes, scene.classes[0] if scene.classes else "Car")

    def frame_id(self, index: int) -> str:
        return f"{index:06d}"


class KittiDataset:
    """KITTI 目录：<root>/training/{velodyne,label_2,calib}/<id>.*"""

    def __init__(self, root: str, config: PipelineConfig):
        base = os.path.join(root, "training") if os.path.isdir(os.path.join(root, "training")) else root
        self.velodyne_dir = os.path.join(base, "velodyne")
        self.label_dir = os.path.join(base, "label_2")
        self.calib_dir = os.path.join(base, "calib")
        if not os.path.isdir(self.velodyne_dir):
            raise ConfigError(f"找不到 velodyne 目录: {self.velodyne_dir}")
        self.ids = sorted(os.path.splitext(name)[0] for name in os.listdir(self.velodyne_dir) if name.endswith(".bin"))
        if not self.ids:
            raise ConfigError(f"{self.velodyne_dir} 中没有 .bin 文件")
        self.config = config
        logger.info(f"KITTI 数据集 {base}: {len(self.ids)} 帧")

    def __len__(self) -> int:
        return len(self.ids)

    def calibration(self, index: int) -> Calibration:
        path = os.path.join(self.calib_dir, f"{self.ids[index]}.txt")
        if os.path.exists(path):
            return parse_calibration(path, tuple(self.config.io.image_size))
        return Calibration.default(tuple(self.config.io.image_size))

    def label_set(self, index: int) -> LabelSet:
        path = os.path.join(self.label_dir, f"{self.ids[index]}.txt")
        if not os.path.exists(path):
            return LabelSet()
        return load_labels(path, self.calibration(index))

    def frame_id(self, index: int) -> str:
        return self.ids[index]

    def __getitem__(self, index: int) -> Scene:
        cloud = load_pointcloud(os.path.join(self.velodyne_dir, f"{self.ids[index]}.bin"))
        if self.config.io.frustum_filter:
            cloud = filter_by_image_frustum(cloud, self.calibration(index))
        labels = self.label_set(index)
        name = self.config.target.kitti_name
        keep = [i for i, c in enumerate(labels.classes) if c == name]
        return Scene(cloud=cloud, boxes=as_box_array([labels.boxes[i] for i in keep]), classes=[name] * len(keep))


def open_dataset(source: str, config: PipelineConfig):
    """"synthetic:N" 生成合成数据，否则视为 KITTI 目录"""
    if source.startswith("synthetic:"):
        try:
            count = int(source.split(":", 1)[1])
        except ValueError as e:
            raise ConfigError(f"合成数据集写法应为 synthetic:N，实际 {source}") from e
        return SyntheticDataset(count, config)
    return KittiDataset(source, config)


def voxelize_scene(scene: Scene, voxel_config: VoxelConfig) -> VoxelBuffers:
    """裁剪、构建缓冲并补充质心偏移"""
    cloud = crop_to_range(scene.cloud, voxel_config.range)
    return augment_with_centroid(build_buffers(cloud, voxel_config))


@dataclass
class PreparedBatch:
    batch: VoxelBatch
    matches: List[MatchLabels]


@dataclass
class TrainResult:
    """训练结果：损失曲线、最终权重路径与计数"""

    losses: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[str] = None
    steps: int = 0
    skipped_frames: int = 0
    skipped_steps: int = 0


class Trainer:
    """
    训练器

    每个 epoch 的样本顺序由 default_rng([seed, epoch]) 决定，每个样本的增强与体素化随机数由
    (seed, epoch, index) 决定，因此损失曲线与线程数无关
    """

    def __init__(self, config: PipelineConfig, dataset, out_dir: Optional[str] = None, threads: int = 1):
        self.config = config
        self.dataset = dataset
        self.out_dir = out_dir
        self.threads = max(1, threads)
        self.model = VoxelNet(config)
        self.grid = make_anchor_grid(config.target, self.model.head_shape, config.voxel.range)
        self.stream = AugmentedStream(dataset, config.aug, seed=config.seed, range_zyx=config.voxel.range)
        self.params = self.model.named_parameters()
        self.optimizer = SgdOptimizer(self.params, config.train.momentum)
        self.step = 0
        self.epoch = 0
        self.batch_cursor = 0
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    # ---- 数据准备 ----

    def _prepare_sample(self, epoch: int, index: int) -> Tuple[VoxelBuffers, MatchLabels]:
        scene = self.stream.sample(epoch, index)
        seed = int(np.random.default_rng([self.config.seed, epoch, index, 1]).integers(2 ** 31))
        voxel_config = self.config.voxel.model_copy(update={"rng_seed": seed})
        buffers = voxelize_scene(scene, voxel_config)
        return buffers, match_anchors(self.grid, scene.boxes, self.config.target)

    def prepare_batch(self, epoch: int, indices: Sequence[int], executor: Optional[ThreadPoolExecutor] = None) -> PreparedBatch:
        """并行准备一个批次，结果顺序与 indices 一致"""
        if executor is None:
            samples = [self._prepare_sample(epoch, i) for i in indices]
        else:
            samples = list(executor.map(lambda i: self._prepare_sample(epoch, i), indices))
        return PreparedBatch(collate_buffers([s[0] for s in samples]), [s[1] for s in samples])

    def epoch_batches(self, epoch: int) -> List[List[int]]:
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.dataset))
        size = self.config.train.batch_size
        return [list(map(int, order[i:i + size])) for i in range(0, len(order), size)]

    # ---- 单步 ----

    def train_step(self, prepared: PreparedBatch, lr: float) -> Optional[Dict[str, float]]:
        """
        一次前向、损失、反向与参数更新

        Returns:
            损失分项；整个批次都没有正样本时返回 None（该步跳过）
        """
        targets = build_targets(prepared.matches)
        frame_pos = targets.frame_num_pos()
        if not frame_pos.any():
            logger.warning(f"第 {self.step} 步: 批次中没有正样本，跳过")
            return None
        self.model.train()
        self.optimizer.zero_grad()
        score, reg = self.model.forward(prepared.batch)
        result = total_loss(score, reg, targets, head=self.config.model.head,
                            alpha=self.config.train.loss_alpha, beta=self.config.train.loss_beta)
        if not math.isfinite(result.total):
            raise DivergenceError(f"第 {self.step} 步损失为 {result.total}，训练发散")
        self.model.backward((result.grad_score, result.grad_reg))
        self.optimizer.step(lr)
        row = {"step": self.step, **result.components()}
        row["skipped_frames"] = result.skipped_frames
        return row

    # ---- 权重 ----

    def state(self) -> Dict[str, np.ndarray]:
        state = self.model.state_dict()
        state.update(self.optimizer.state_dict())
        return state

    def save(self, path: str) -> str:
        save_checkpoint(path, self.state(), meta={"step": self.step, "epoch": self.epoch, "batch": self.batch_cursor})
        return path

    def load(self, path: str) -> None:
        """载入权重与训练进度，续训从记录的 (epoch, batch) 继续"""
        state, meta = load_checkpoint(path)
        model_state = {k: v for k, v in state.items() if not k.startswith(MOMENTUM_PREFIX)}
        self.model.load_state_dict(model_state)
        self.optimizer.load_state_dict(state)
        self.step = int(meta.get("step", 0))
        self.epoch = int(meta.get("epoch", 0))
        self.batch_cursor = int(meta.get("batch", 0))
        logger.info(f"从 {path} 续训: epoch={self.epoch} batch={self.batch_cursor} step={self.step}")

    # ---- 主循环 ----

    def _write_csv(self, rows: List[Dict[str, float]], append: bool) -> None:
        if not self.out_dir:
            return
        path = os.path.join(self.out_dir, "loss.csv")
        new_file = not append or not os.path.exists(path)
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            if new_file:
                writer.writerow(LOSS_COLUMNS)
            for row in rows:
                writer.writerow([row["step"]] + [f"{row[c]:.9g}" for c in LOSS_COLUMNS[1:]])

    def train(self, max_steps: Optional[int] = None) -> TrainResult:
        """
        训练到配置的轮数或 max_steps

        Returns:
            TrainResult
        """
        settings = self.config.train
        max_steps = max_steps if max_steps is not None else settings.max_steps
        result = TrainResult()
        resumed = self.step > 0
        self._write_csv([], append=resumed)
        workers = ThreadPoolExecutor(max_workers=self.threads) if self.threads > 1 else None
        try:
            self._run_epochs(settings, max_steps, result, workers)
        finally:
            if workers is not None:
                workers.shutdown()
        if self.out_dir:
            result.checkpoint = self.save(os.path.join(self.out_dir, "final.vxpc"))
        result.steps = self.step
        logger.info(f"训练结束: {self.step} 步，跳过 {result.skipped_frames} 帧")
        return result

    def _run_epochs(self, settings: TrainSettings, max_steps: Optional[int], result: TrainResult,
                    workers: Optional[ThreadPoolExecutor]) -> None:
        with ThreadPoolExecutor(max_workers=1) as executor:
            while self.epoch < settings.epochs:
                batches = self.epoch_batches(self.epoch)
                lr = learning_rate(self.epoch, settings)
                pending: Optional[Future] = None
                if self.batch_cursor < len(batches):
                    pending = executor.submit(self.prepare_batch, self.epoch, batches[self.batch_cursor], workers)
                while self.batch_cursor < len(batches):
                    prepared = pending.result()
                    nxt = self.batch_cursor + 1
                    # 下一批的数据准备与本步计算重叠
                    pending = executor.submit(self.prepare_batch, self.epoch, batches[nxt], workers) if nxt < len(batches) else None
                    row = self.train_step(prepared, lr)
                    self.batch_cursor = nxt
                    if row is None:
                        result.skipped_steps += 1
                        result.skipped_frames += len(prepared.matches)
                        continue
                    result.skipped_frames += int(row.pop("skipped_frames"))
                    self.step += 1
                    result.losses.append(row)
                    self._write_csv([row], append=True)
                    if self.step % 10 == 0 or self.step == 1:
                        logger.info(f"epoch {self.epoch} step {self.step} lr {lr:g} loss {row['loss']:.6f}")
                    if max_steps is not None and self.step >= max_steps:
                        break
                if max_steps is not None and self.step >= max_steps:
                    if pending is not None:
                        pending.cancel()
                    break
                self.epoch += 1
                self.batch_cursor = 0
                if self.out_dir and self.epoch in (settings.decay_epoch, settings.epochs):
                    result.checkpoint = self.save(os.path.join(self.out_dir, f"epoch_{self.epoch:04d}.vxpc"))


def train(config: PipelineConfig, dataset, out_dir: Optional[str] = None, threads: int = 1,
          resume: Optional[str] = None, max_steps: Optional[int] = None) -> TrainResult:
    """构建 Trainer 并训练"""
    trainer = Trainer(config, dataset, out_dir=out_dir, threads=threads)
    if resume:
        trainer.load(resume)
    return trainer.train(max_steps=max_steps)


def infer_scene(model: VoxelNet, grid: AnchorGrid, scene: Scene, config: PipelineConfig,
                score_thresh: Optional[float] = None) -> List[Detection]:
    """
    单帧推理：体素化 → 前向（BN 用 running 统计量）→ 解码 → NMS

    Args:
        model: 网络
        grid: 锚框网格
        scene: 场景（只用点云）
        config: 管线配置
        score_thresh: 覆盖配置中的分数阈值

    Returns:
        NMS 后的检测
    """
    buffers = voxelize_scene(scene, config.voxel)
    model.eval()
    score, reg = model.forward(collate_buffers([buffers]))
    thresh = config.eval.score_thresh if score_thresh is None else score_thresh
    dets = decode_detections(score[0], reg[0], grid, thresh, head=config.model.head, cls=config.target.kitti_name)
    return nms_bev(dets, config.eval.nms_iou)


def membership_counts(scene: Scene) -> np.ndarray:
    """每个框包含的点数"""
    return np.array([int(points_in_box(scene.cloud.points, box).sum()) for box in scene.boxes], dtype=np.int64)
