"""
体素特征编码 (VFE)
逐点 FCN → 体素内逐元素最大值 → 与逐点特征拼接；所有体素共享同一组 FCN 参数
"""

import logging
from typing import List, Optional, Sequence

import numpy as np

from config import ModelSettings
from errors import InvariantError, ShapeError
from nn_kernels import functional as F
from nn_kernels.base_layer import Layer
from nn_kernels.layers import BatchNorm, Linear, ReLU

logger = logging.getLogger(__name__)

INPUT_FEATURES = 7


def occupancy_mask(counts: np.ndarray, max_points: int) -> np.ndarray:
    """(K, T) 掩码，第 t 行在 t < counts[k] 时被占用"""
    return np.arange(max_points)[None, :] < np.asarray(counts)[:, None]


def check_zero_rows(x: np.ndarray, mask: np.ndarray, where: str) -> None:
    if np.any(x[~mask] != 0):
        raise InvariantError(f"{where}: 未占用的行不是全零")


class PointFcn(Layer):
    """逐点 FCN: Linear + BN + ReLU，BN 的统计总体为所有被占用的点"""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, settings: ModelSettings, name: str):
        super().__init__(name)
        self.linear = Linear(c_in, c_out, rng, name="linear")
        self.use_bn = settings.vfe_bn == "points"
        self.bn = BatchNorm(c_out, axis=-1, momentum=settings.bn_momentum, eps=settings.bn_eps, name="bn")
        self.relu = ReLU(name="relu")

    def children(self) -> List[Layer]:
        return [self.linear, self.bn, self.relu] if self.use_bn else [self.linear, self.relu]

    def forward(self, x, mask: Optional[np.ndarray] = None, **kwargs):
        h = self.linear.forward(x)
        if self.use_bn:
            h = self.bn.forward(h, mask=mask)
        return self.relu.forward(h)

    def backward(self, dy):
        dy = self.relu.backward(dy)
        if self.use_bn:
            dy = self.bn.backward(dy)
        return self.linear.backward(dy)

    def output_shape(self, input_shape):
        return self.linear.output_shape(input_shape)


class VfeLayer(Layer):
    """
    VFE-i(c_in, c_out)
    输出每个被占用行为 concat(f_i, f~)，f~ 为体素内 f_i 的逐元素最大值；未占用行置零
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, settings: ModelSettings, name: str = "vfe"):
        super().__init__(name)
        if c_out % 2:
            raise ShapeError(f"VFE 输出通道必须为偶数: {c_out}")
        self.c_in, self.c_out = c_in, c_out
        self.fcn = PointFcn(c_in, c_out // 2, rng, settings, name="fcn")
        self._mask = None
        self._pool_cache = None

    def children(self):
        return [self.fcn]

    def forward(self, x, mask: Optional[np.ndarray] = None, **kwargs):
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        check_zero_rows(x, mask, self.name)
        point_features = self.fcn.forward(x, mask=mask)
        aggregated, self._pool_cache = F.maxpool_over_axis(point_features, axis=1, mask=mask)
        tiled = np.broadcast_to(aggregated[:, None, :], point_features.shape)
        out = np.concatenate([point_features, tiled], axis=-1)
        self._mask = mask
        return out * mask[:, :, None]

    def backward(self, dy):
        half = self.c_out // 2
        dy = dy * self._mask[:, :, None]
        d_point = dy[..., :half] + F.maxpool_backward(dy[..., half:].sum(axis=1), self._pool_cache)
        return self.fcn.backward(d_point)

    def output_shape(self, input_shape):
        if input_shape[-1] != self.c_in:
            raise ShapeError(f"{self.name}: 输入通道 {input_shape[-1]} != {self.c_in}")
        return tuple(input_shape[:-1]) + (self.c_out,)


class FinalFcn(Layer):
    """最后一层 FCN 到 C 维，再对体素内取最大值，得到 (K, C)"""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, settings: ModelSettings, name: str = "final"):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        self.fcn = PointFcn(c_in, c_out, rng, settings, name="fcn")
        self._pool_cache = None

    def children(self):
        return [self.fcn]

    def forward(self, x, mask: Optional[np.ndarray] = None, **kwargs):
        if mask is None:
            mask = np.ones(x.shape[:2], dtype=bool)
        h = self.fcn.forward(x, mask=mask)
        out, self._pool_cache = F.maxpool_over_axis(h, axis=1, mask=mask)
        return out

    def backward(self, dy):
        return self.fcn.backward(F.maxpool_backward(dy, self._pool_cache))

    def output_shape(self, input_shape):
        return (input_shape[0], self.c_out)


class FeatureNet(Layer):
    """堆叠 VFE 加最终 FCN：(K, T, 7) → (K, C)"""

    def __init__(self, settings: ModelSettings, rng: Optional[np.random.Generator] = None, name: str = "feature_net"):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(settings.init_seed)
        channels = [INPUT_FEATURES] + list(settings.vfe_channels)
        self.vfe_layers = [
            VfeLayer(channels[i], channels[i + 1], rng, settings, name=f"vfe{i + 1}")
            for i in range(len(channels) - 1)
        ]
        self.final = FinalFcn(channels[-1], settings.feature_dim, rng, settings)
        self.output_dim = settings.feature_dim

    def children(self):
        return self.vfe_layers + [self.final]

    def forward(self, x, counts: Optional[np.ndarray] = None, **kwargs):
        if x.shape[-1] != INPUT_FEATURES:
            raise ShapeError(f"体素输入特征维数需为 {INPUT_FEATURES}，实际 {x.shape[-1]}")
        counts = np.full(x.shape[0], x.shape[1]) if counts is None else counts
        mask = occupancy_mask(counts, x.shape[1])
        for layer in self.vfe_layers:
            x = layer.forward(x, mask=mask)
        return self.final.forward(x, mask=mask)

    def backward(self, dy):
        dy = self.final.backward(dy)
        for layer in reversed(self.vfe_layers):
            dy = layer.backward(dy)
        return dy

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.vfe_layers:
            shape = layer.output_shape(shape)
        return self.final.output_shape(shape)

    def shape_chain(self, input_shape: Sequence[int]) -> List[tuple]:
        """逐层形状，例如车辆配置 K×35×7 → K×35×32 → K×35×128 → K×128"""
        shapes = [tuple(input_shape)]
        for layer in self.vfe_layers:
            shapes.append(layer.output_shape(shapes[-1]))
        shapes.append(self.final.output_shape(shapes[-1]))
        return shapes


def vfe_forward(buffers: np.ndarray, counts: np.ndarray, layer: VfeLayer) -> np.ndarray:
    """单个 VFE 层的前向：(K, T, c_in) → (K, T, c_out)"""
    return layer.forward(buffers, mask=occupancy_mask(counts, buffers.shape[1]))


def voxel_feature(buffers: np.ndarray, counts: np.ndarray, final_fcn: FinalFcn) -> np.ndarray:
    """最后一个 VFE 的输出经 FCN 后取最大值：(K, T, c) → (K, C)"""
    return final_fcn.forward(buffers, mask=occupancy_mask(counts, buffers.shape[1]))
