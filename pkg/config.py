"""
项目配置常量与配置模型
默认值来自车辆/行人/骑行者三套任务配置；配置文件为扁平的 key = value 文本
"""

import math
import logging
from typing import Any, Dict, Literal, Optional, Tuple

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError

logger = logging.getLogger(__name__)


# 默认配置
class DefaultConfig:
    # 体素划分（各轴顺序 Z, Y, X）
    CAR_RANGE = (-3.0, 1.0, -40.0, 40.0, 0.0, 70.4)
    PEDESTRIAN_RANGE = (-3.0, 1.0, -20.0, 20.0, 0.0, 48.0)
    REDUCED_RANGE = (-3.0, 1.0, -8.0, 8.0, 0.0, 16.0)
    VOXEL_SIZE = (0.4, 0.2, 0.2)
    CAR_MAX_POINTS = 35
    PEDESTRIAN_MAX_POINTS = 45
    CAR_MAX_VOXELS = 20000
    PEDESTRIAN_MAX_VOXELS = 12000

    # 锚框 (l, w, h) 与中心高度
    CAR_ANCHOR = (3.9, 1.6, 1.56)
    CAR_ANCHOR_Z = -1.0
    PEDESTRIAN_ANCHOR = (0.8, 0.6, 1.73)
    CYCLIST_ANCHOR = (1.76, 0.6, 1.73)
    SMALL_ANCHOR_Z = -0.6
    ANCHOR_ROTATIONS = (0.0, math.pi / 2)

    # 锚框匹配阈值
    CAR_POS_IOU = 0.6
    CAR_NEG_IOU = 0.45
    SMALL_POS_IOU = 0.5
    SMALL_NEG_IOU = 0.35

    # 损失权重
    LOSS_ALPHA = 1.5
    LOSS_BETA = 1.0
    SMOOTH_L1_THRESHOLD = 1.0

    # 网络
    BN_MOMENTUM = 0.99
    BN_EPS = 1e-5

    # 训练
    LEARNING_RATE = 0.01
    DECAYED_LEARNING_RATE = 0.001
    EPOCHS = 160
    DECAY_EPOCH = 150
    BATCH_SIZE = 16

    # 后处理与评估
    SCORE_THRESHOLD = 0.5
    NMS_IOU_THRESHOLD = 0.1
    CAR_EVAL_IOU = 0.7
    SMALL_EVAL_IOU = 0.5
    # KITTI 难度划分: (最小 2D 框高度 px, 最大遮挡等级, 最大截断比例)
    DIFFICULTY_FILTERS = {
        "easy": (40.0, 0, 0.15),
        "moderate": (25.0, 1, 0.30),
        "hard": (25.0, 2, 0.50),
    }

    # 数据
    IMAGE_SIZE = (1242, 375)
    DEFAULT_PROFILE = "car"


# 支持的选项
class SupportedOptions:
    CLASSES = ["car", "pedestrian", "cyclist"]
    PROFILES = ["car", "pedestrian", "cyclist", "reduced"]
    KITTI_CLASS_NAMES = {"car": "Car", "pedestrian": "Pedestrian", "cyclist": "Cyclist"}
    LABEL_CLASSES = ["Car", "Pedestrian", "Cyclist", "DontCare"]
    HEAD_MODES = ["sigmoid", "softmax2"]
    EVAL_MODES = ["bev", "3d"]
    INTERPOLATION_POINTS = [11, 40]


class VoxelConfig(BaseModel):
    """体素划分配置：范围 (z_min, z_max, y_min, y_max, x_min, x_max)，体素尺寸 (v_D, v_H, v_W)"""

    model_config = ConfigDict(frozen=True)

    range: Tuple[float, float, float, float, float, float] = DefaultConfig.CAR_RANGE
    voxel_size: Tuple[float, float, float] = DefaultConfig.VOXEL_SIZE
    max_points: int = Field(DefaultConfig.CAR_MAX_POINTS, ge=1)
    max_voxels: int = Field(DefaultConfig.CAR_MAX_VOXELS, ge=1)
    rng_seed: int = 0

    @field_validator("range")
    @classmethod
    def _check_range(cls, value):
        for axis in range(3):
            if not value[2 * axis] < value[2 * axis + 1]:
                raise ValueError(f"范围第 {axis} 轴下界必须小于上界: {value}")
        return value

    @field_validator("voxel_size")
    @classmethod
    def _check_voxel_size(cls, value):
        if any(v <= 0 for v in value):
            raise ValueError(f"体素尺寸必须为正: {value}")
        return value


class ClassConfig(BaseModel):
    """检测类别配置：锚框尺寸、匹配阈值、RPN 首层步长"""

    model_config = ConfigDict(frozen=True)

    name: Literal["car", "pedestrian", "cyclist"] = "car"
    anchor_size: Tuple[float, float, float] = DefaultConfig.CAR_ANCHOR
    anchor_z: float = DefaultConfig.CAR_ANCHOR_Z
    anchor_rotations: Tuple[float, ...] = DefaultConfig.ANCHOR_ROTATIONS
    pos_iou: float = DefaultConfig.CAR_POS_IOU
    neg_iou: float = DefaultConfig.CAR_NEG_IOU
    eval_iou: float = Field(DefaultConfig.CAR_EVAL_IOU, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_thresholds(self):
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError(f"匹配阈值需满足 0 <= neg <= pos <= 1: {self.neg_iou}, {self.pos_iou}")
        if any(v <= 0 for v in self.anchor_size):
            raise ValueError(f"锚框尺寸必须为正: {self.anchor_size}")
        return self

    @property
    def kitti_name(self) -> str:
        return SupportedOptions.KITTI_CLASS_NAMES[self.name]


class ModelSettings(BaseModel):
    """网络结构配置"""

    model_config = ConfigDict(frozen=True)

    vfe_channels: Tuple[int, ...] = (32, 128)
    feature_dim: int = 128
    middle_channels: int = 64
    rpn_block_channels: Tuple[int, int, int] = (128, 128, 256)
    rpn_block_convs: Tuple[int, int, int] = (3, 5, 5)
    rpn_first_strides: Tuple[int, int, int] = (2, 2, 2)
    rpn_upsample_channels: int = 256
    head: Literal["sigmoid", "softmax2"] = "sigmoid"
    vfe_bn: Literal["points", "none"] = "points"
    bn_momentum: float = DefaultConfig.BN_MOMENTUM
    bn_eps: float = DefaultConfig.BN_EPS
    init_seed: int = 0

    @field_validator("vfe_channels")
    @classmethod
    def _check_vfe(cls, value):
        if not value or any(c <= 0 or c % 2 for c in value):
            raise ValueError(f"VFE 输出通道必须为正偶数: {value}")
        return value


class AugSettings(BaseModel):
    """在线数据增强配置"""

    model_config = ConfigDict(frozen=True)

    enable_perturb: bool = True
    enable_scale: bool = True
    enable_rotate: bool = True
    perturb_rotation: float = math.pi / 10
    perturb_translation_std: float = 1.0
    scale_range: Tuple[float, float] = (0.95, 1.05)
    rotate_range: float = math.pi / 4


class TrainSettings(BaseModel):
    """训练配置"""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(DefaultConfig.LEARNING_RATE, ge=0.0)
    decayed_learning_rate: float = Field(DefaultConfig.DECAYED_LEARNING_RATE, ge=0.0)
    epochs: int = Field(DefaultConfig.EPOCHS, ge=1)
    decay_epoch: int = Field(DefaultConfig.DECAY_EPOCH, ge=0)
    batch_size: int = Field(DefaultConfig.BATCH_SIZE, ge=1)
    momentum: float = Field(0.0, ge=0.0, lt=1.0)
    max_steps: Optional[int] = Field(None, ge=1)
    loss_alpha: float = DefaultConfig.LOSS_ALPHA
    loss_beta: float = DefaultConfig.LOSS_BETA


class EvalSettings(BaseModel):
    """后处理与评估配置"""

    model_config = ConfigDict(frozen=True)

    score_thresh: float = DefaultConfig.SCORE_THRESHOLD
    nms_iou: float = DefaultConfig.NMS_IOU_THRESHOLD
    mode: Literal["bev", "3d"] = "bev"
    interpolation: int = 11

    @field_validator("interpolation")
    @classmethod
    def _check_interpolation(cls, value):
        if value not in SupportedOptions.INTERPOLATION_POINTS:
            raise ValueError(f"插值点数只支持 {SupportedOptions.INTERPOLATION_POINTS}: {value}")
        return value


class IoSettings(BaseModel):
    """数据读取配置"""

    model_config = ConfigDict(frozen=True)

    frustum_filter: bool = False
    image_size: Tuple[int, int] = DefaultConfig.IMAGE_SIZE


class PipelineConfig(BaseModel):
    """完整管线配置"""

    model_config = ConfigDict(frozen=True)

    profile: str = DefaultConfig.DEFAULT_PROFILE
    seed: int = 0
    voxel: VoxelConfig = VoxelConfig()
    target: ClassConfig = ClassConfig()
    model: ModelSettings = ModelSettings()
    aug: AugSettings = AugSettings()
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()
    io: IoSettings = IoSettings()

    def snapshot(self) -> Dict[str, Any]:
        """获取可序列化的配置快照"""
        return self.model_dump(mode="json")


def _profile_overrides(profile: str) -> Dict[str, Any]:
    """
    获取命名配置相对默认值的改动

    Args:
        profile: car / pedestrian / cyclist / reduced

    Returns:
        嵌套的覆盖字典
    """
    if profile == "car":
        return {}
    if profile in ("pedestrian", "cyclist"):
        anchor = DefaultConfig.PEDESTRIAN_ANCHOR if profile == "pedestrian" else DefaultConfig.CYCLIST_ANCHOR
        return {
            "voxel": {
                "range": DefaultConfig.PEDESTRIAN_RANGE,
                "max_points": DefaultConfig.PEDESTRIAN_MAX_POINTS,
                "max_voxels": DefaultConfig.PEDESTRIAN_MAX_VOXELS,
            },
            "target": {
                "name": profile,
                "anchor_size": anchor,
                "anchor_z": DefaultConfig.SMALL_ANCHOR_Z,
                "pos_iou": DefaultConfig.SMALL_POS_IOU,
                "neg_iou": DefaultConfig.SMALL_NEG_IOU,
                "eval_iou": DefaultConfig.SMALL_EVAL_IOU,
            },
            "model": {"rpn_first_strides": (1, 2, 2)},
        }
    if profile == "reduced":
        # 桌面规模：16m x 16m x 4m，BEV 80x80，通道数为原来的四分之一
        return {
            "voxel": {"range": DefaultConfig.REDUCED_RANGE, "max_voxels": 6000},
            "model": {
                "vfe_channels": (8, 32),
                "feature_dim": 32,
                "middle_channels": 16,
                "rpn_block_channels": (32, 32, 64),
                "rpn_upsample_channels": 64,
            },
            "train": {"batch_size": 4, "epochs": 50, "decay_epoch": 45},
        }
    raise ConfigError(f"未知的配置名: {profile}，可选 {SupportedOptions.PROFILES}")


def _deep_merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def build_config(profile: str = DefaultConfig.DEFAULT_PROFILE, overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    按命名配置构建管线配置

    Args:
        profile: 配置名
        overrides: 嵌套覆盖字典

    Returns:
        校验后的 PipelineConfig
    """
    data = _deep_merge({"profile": profile}, _profile_overrides(profile))
    if overrides:
        data = _deep_merge(data, overrides)
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e


def _parse_value(raw: Optional[str]) -> Any:
    if raw is None:
        return None
    if "," in raw:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw.strip()


def parse_flat_config(values: Dict[str, Optional[str]]) -> Dict[str, Any]:
    """
    将点分键的扁平键值对转换为嵌套字典

    Args:
        values: 例如 {"voxel.max_voxels": "20000"}

    Returns:
        嵌套字典
    """
    nested: Dict[str, Any] = {}
    for key, raw in values.items():
        node = nested
        parts = key.strip().split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"配置键冲突: {key}")
            node = child
        node[parts[-1]] = _parse_value(raw)
    return nested


def load_config(path: Optional[str] = None, profile: Optional[str] = None) -> PipelineConfig:
    """
    读取扁平 key = value 配置文件

    Args:
        path: 配置文件路径；为空时只使用命名配置
        profile: 命名配置，文件中的 profile 键优先级更低

    Returns:
        PipelineConfig
    """
    overrides: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values = dotenv_values(stream=f)
        except OSError as e:
            raise ConfigError(f"无法读取配置文件 {path}: {e}") from e
        overrides = parse_flat_config(values)
        logger.info(f"从 {path} 读取了 {len(values)} 个配置项")
    chosen = profile or overrides.pop("profile", None) or DefaultConfig.DEFAULT_PROFILE
    overrides.pop("profile", None)
    return build_config(chosen, overrides)
