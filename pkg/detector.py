"""
卷积中间层与区域提议网络 (RPN)
体素特征 → 稠密 C×D'×H'×W' → Conv3D ×3 → 合并通道与深度得到 BEV → RPN → 概率图与回归图
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import ModelSettings, PipelineConfig
from errors import ShapeError
from nn_kernels import functional as F
from nn_kernels.base_layer import Layer, Sequential
from nn_kernels.conv import upsample_params
from nn_kernels.layers import Conv, conv_bn_relu
from vfe_net import FeatureNet
from voxel_pipeline import VoxelBatch, gather_batch, grid_dims, scatter_batch

logger = logging.getLogger(__name__)

BOX_PARAMS = 7


@dataclass(frozen=True)
class ConvSpec:
    """ConvMD(c_in, c_out, k, s, p)"""

    c_in: int
    c_out: int
    kernel: int
    stride: Tuple[int, ...]
    padding: Tuple[int, ...]


@dataclass(frozen=True)
class MiddleSpec:
    layers: Tuple[ConvSpec, ...]

    @classmethod
    def default(cls, feature_dim: int = 128, channels: int = 64) -> "MiddleSpec":
        """Conv3D(C,64,3,(2,1,1),(1,1,1)), Conv3D(64,64,3,(1,1,1),(0,1,1)), Conv3D(64,64,3,(2,1,1),(1,1,1))"""
        return cls((
            ConvSpec(feature_dim, channels, 3, (2, 1, 1), (1, 1, 1)),
            ConvSpec(channels, channels, 3, (1, 1, 1), (0, 1, 1)),
            ConvSpec(channels, channels, 3, (2, 1, 1), (1, 1, 1)),
        ))

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.c_out != nxt.c_in:
                raise ShapeError(f"中间层通道不衔接: {prev} → {nxt}")


@dataclass(frozen=True)
class RpnSpec:
    """三个块：(首层步长, 额外卷积数 q, 通道)，以及上采样通道与锚框数"""

    in_channels: int
    block_strides: Tuple[int, int, int]
    block_convs: Tuple[int, int, int]
    block_channels: Tuple[int, int, int]
    upsample_channels: int
    num_anchors: int = 2
    head: str = "sigmoid"

    @classmethod
    def from_settings(cls, settings: ModelSettings, in_channels: int, num_anchors: int) -> "RpnSpec":
        return cls(
            in_channels=in_channels,
            block_strides=tuple(settings.rpn_first_strides),
            block_convs=tuple(settings.rpn_block_convs),
            block_channels=tuple(settings.rpn_block_channels),
            upsample_channels=settings.rpn_upsample_channels,
            num_anchors=num_anchors,
            head=settings.head,
        )

    @property
    def score_channels(self) -> int:
        return self.num_anchors * (2 if self.head == "softmax2" else 1)

    @property
    def reg_channels(self) -> int:
        return self.num_anchors * BOX_PARAMS

    def upsample_factors(self) -> List[float]:
        """各块输出相对 H/2 分辨率的上采样倍数"""
        factors, total = [], 1
        for stride in self.block_strides:
            total *= stride
            factors.append(total / 2.0)
        return factors


class MiddleLayers(Sequential):
    """Conv3D + BN + ReLU 依次堆叠"""

    def __init__(self, spec: MiddleSpec, settings: ModelSettings, rng: np.random.Generator, name: str = "middle"):
        layers: List[Layer] = []
        for i, conv in enumerate(spec.layers):
            layers.extend(conv_bn_relu(3, conv.c_in, conv.c_out, conv.kernel, conv.stride, conv.padding, rng,
                                       settings.bn_momentum, settings.bn_eps, name=f"conv3d{i + 1}"))
        super().__init__(layers, name=name)
        self.spec = spec


def reshape_to_bev(x: np.ndarray, expected_depth: Optional[int] = None) -> np.ndarray:
    """
    合并通道与深度轴：(B, C, D, H, W) → (B, C·D, H, W)，元素 (c, d) 位于合并通道 c·D + d

    Args:
        x: 中间层输出（也接受不带 batch 维的 (C, D, H, W)）
        expected_depth: 期望的深度，不一致时报错

    Returns:
        BEV 特征图
    """
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    if x.ndim != 5:
        raise ShapeError(f"reshape_to_bev 输入需为 (B, C, D, H, W)，实际 {x.shape}")
    b, c, d, h, w = x.shape
    if expected_depth is not None and d != expected_depth:
        raise ShapeError(f"中间层输出深度为 {d}，期望 {expected_depth}")
    bev = x.reshape(b, c * d, h, w)
    return bev[0] if squeeze else bev


def split_from_bev(bev: np.ndarray, depth: int) -> np.ndarray:
    """reshape_to_bev 的逆"""
    squeeze = bev.ndim == 3
    if squeeze:
        bev = bev[None]
    b, cd, h, w = bev.shape
    if cd % depth:
        raise ShapeError(f"通道数 {cd} 不能被深度 {depth} 整除")
    x = bev.reshape(b, cd // depth, depth, h, w)
    return x[0] if squeeze else x


class Rpn(Layer):
    """
    三个下采样块，各块输出上采样到 H/2×W/2 后拼接，再由两个 1×1 卷积输出概率图与回归图
    前向返回 (score_logits, reg_map)，反向接收对应的 (d_score, d_reg)
    """

    def __init__(self, spec: RpnSpec, settings: ModelSettings, rng: np.random.Generator, name: str = "rpn"):
        super().__init__(name)
        self.spec = spec
        self.blocks: List[Sequential] = []
        self.upsamples: List[Sequential] = []
        c_in = spec.in_channels
        for i, (stride, q, channels) in enumerate(zip(spec.block_strides, spec.block_convs, spec.block_channels)):
            layers = conv_bn_relu(2, c_in, channels, 3, stride, 1, rng, settings.bn_momentum, settings.bn_eps,
                                  name=f"b{i + 1}_conv0")
            for j in range(q):
                layers += conv_bn_relu(2, channels, channels, 3, 1, 1, rng, settings.bn_momentum, settings.bn_eps,
                                       name=f"b{i + 1}_conv{j + 1}")
            self.blocks.append(Sequential(layers, name=f"block{i + 1}"))
            kind, kernel, up_stride, padding = upsample_params(spec.upsample_factors()[i])
            self.upsamples.append(Sequential(
                conv_bn_relu(2, channels, spec.upsample_channels, kernel, up_stride, padding, rng,
                             settings.bn_momentum, settings.bn_eps, name=f"up{i + 1}", deconv=kind == "deconv"),
                name=f"upsample{i + 1}",
            ))
            c_in = channels
        concat_channels = spec.upsample_channels * len(self.blocks)
        # 两个头都是纯线性的 1x1 卷积
        self.score_head = Conv(2, concat_channels, spec.score_channels, 1, 1, 0, rng=rng, name="score_head")
        self.reg_head = Conv(2, concat_channels, spec.reg_channels, 1, 1, 0, rng=rng, name="reg_head")
        self._up_channels = spec.upsample_channels

    def children(self):
        return self.blocks + self.upsamples + [self.score_head, self.reg_head]

    def check_input(self, shape: Sequence[int]) -> None:
        total = int(np.prod(self.spec.block_strides))
        h, w = shape[-2:]
        if h % total or w % total or h % 2 or w % 2:
            raise ShapeError(f"RPN 输入 {h}×{w} 需能被 {max(total, 2)} 整除")

    def forward(self, x, **kwargs):
        self.check_input(x.shape)
        ups = []
        h = x
        for block, up in zip(self.blocks, self.upsamples):
            h = block.forward(h)
            ups.append(up.forward(h))
        concat = np.concatenate(ups, axis=1)
        return self.score_head.forward(concat), self.reg_head.forward(concat)

    def backward(self, dy):
        d_score, d_reg = dy
        d_concat = self.score_head.backward(d_score) + self.reg_head.backward(d_reg)
        pieces = np.split(d_concat, len(self.blocks), axis=1)
        carry = None
        for i in reversed(range(len(self.blocks))):
            d_out = self.upsamples[i].backward(pieces[i])
            if carry is not None:
                d_out = d_out + carry
            carry = self.blocks[i].backward(d_out)
        return carry

    def output_shape(self, input_shape):
        self.check_input(input_shape)
        shape = tuple(input_shape)
        up_shapes = []
        for block, up in zip(self.blocks, self.upsamples):
            shape = block.output_shape(shape)
            up_shapes.append(up.output_shape(shape))
        if len({s[2:] for s in up_shapes}) != 1:
            raise ShapeError(f"上采样后尺寸不一致: {up_shapes}")
        b, _, h, w = up_shapes[0]
        return (b, self.spec.score_channels, h, w), (b, self.spec.reg_channels, h, w)

    def stage_shapes(self, input_shape) -> List[Tuple[str, tuple]]:
        """各块、各上采样、拼接与两个头的形状"""
        shape = tuple(input_shape)
        stages = []
        for i, (block, up) in enumerate(zip(self.blocks, self.upsamples)):
            shape = block.output_shape(shape)
            stages.append((f"rpn.block{i + 1}", shape))
            stages.append((f"rpn.upsample{i + 1}", up.output_shape(shape)))
        score, reg = self.output_shape(input_shape)
        stages.append(("rpn.concat", (score[0], self._up_channels * len(self.blocks)) + score[2:]))
        stages.append(("rpn.score", score))
        stages.append(("rpn.reg", reg))
        return stages


def anchor_probabilities(score_logits: np.ndarray, head: str = "sigmoid") -> np.ndarray:
    """
    把分类头输出转为每个锚框的正类概率

    Args:
        score_logits: (B, A, H, W)（sigmoid）或 (B, 2A, H, W)（softmax2，通道 2a 为负类、2a+1 为正类）
        head: 头类型

    Returns:
        (B, A, H, W)
    """
    if head == "sigmoid":
        return F.sigmoid(score_logits)
    b, c, h, w = score_logits.shape
    pairs = score_logits.reshape(b, c // 2, 2, h, w)
    return F.softmax2(pairs, axis=2)[:, :, 1]


class VoxelNet(Layer):
    """完整网络：FeatureNet → 稠密化 → MiddleLayers → BEV → Rpn"""

    def __init__(self, config: PipelineConfig, name: str = "voxelnet"):
        super().__init__(name)
        settings = config.model
        rng = np.random.default_rng(settings.init_seed)
        self.grid = grid_dims(config.voxel)
        self.head = settings.head
        self.feature_net = FeatureNet(settings, rng)
        self.middle_spec = MiddleSpec.default(settings.feature_dim, settings.middle_channels)
        self.middle = MiddleLayers(self.middle_spec, settings, rng)
        out = self.middle.output_shape((1, settings.feature_dim) + self.grid)
        self.bev_depth = out[2]
        num_anchors = len(config.target.anchor_rotations)
        self.rpn_spec = RpnSpec.from_settings(settings, settings.middle_channels * self.bev_depth, num_anchors)
        self.rpn = Rpn(self.rpn_spec, settings, rng)
        self._cache = None

    def children(self):
        return [self.feature_net, self.middle, self.rpn]

    def forward(self, batch: VoxelBatch, **kwargs):
        if batch.grid != self.grid:
            raise ShapeError(f"批次网格 {batch.grid} 与模型 {self.grid} 不一致")
        voxel_features = self.feature_net.forward(batch.features, counts=batch.counts)
        dense = scatter_batch(voxel_features, batch.coords, batch.batch_index, batch.batch_size, self.grid)
        mid = self.middle.forward(dense)
        bev = reshape_to_bev(mid, expected_depth=self.bev_depth)
        self._cache = (batch, mid.shape)
        return self.rpn.forward(bev)

    def backward(self, dy):
        batch, mid_shape = self._cache
        d_bev = self.rpn.backward(dy)
        d_dense = self.middle.backward(d_bev.reshape(mid_shape))
        d_voxel = gather_batch(d_dense, batch.coords, batch.batch_index)
        return self.feature_net.backward(d_voxel)

    def output_shape(self, input_shape):
        """input_shape 为 (B, K, T, 7)"""
        b, k, t, c = input_shape
        feature_shape = self.feature_net.output_shape((k, t, c))
        mid = self.middle.output_shape((b, feature_shape[-1]) + self.grid)
        return self.rpn.output_shape((b, mid[1] * mid[2]) + mid[3:])

    def probabilities(self, score_logits: np.ndarray) -> np.ndarray:
        return anchor_probabilities(score_logits, self.head)

    @property
    def head_shape(self) -> Tuple[int, int]:
        score, _ = self.output_shape((1, 1, 1, 7))
        return score[2], score[3]


def shape_plan(config: PipelineConfig, batch_size: int = 1) -> List[Tuple[str, tuple]]:
    """
    只做形状推算的整网形状表（全尺寸配置也可瞬间完成）

    Args:
        config: 管线配置
        batch_size: 批大小

    Returns:
        [(阶段名, 形状)]，例如车辆配置的中间层输出 (B, 64, 2, 400, 352)
    """
    model = VoxelNet(config)
    k, t = config.voxel.max_voxels, config.voxel.max_points
    plan = [("grid", model.grid)]
    for i, shape in enumerate(model.feature_net.shape_chain((k, t, 7))):
        plan.append((f"vfe.{i}", shape))
    shape = (batch_size, config.model.feature_dim) + model.grid
    plan.append(("sparse_tensor", shape))
    for i, layer in enumerate(model.middle.layers[::3]):
        shape = layer.output_shape(shape)
        plan.append((f"middle.{i + 1}", shape))
    bev = (batch_size, shape[1] * shape[2]) + shape[3:]
    plan.append(("bev", bev))
    plan.extend(model.rpn.stage_shapes(bev))
    return plan
