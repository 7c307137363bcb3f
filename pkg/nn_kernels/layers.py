"""
基础网络层
Linear / BatchNorm / ReLU / Conv / Deconv，权重按 fan-in 均匀初始化，BN scale 为 1、shift 为 0
"""

import math
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from errors import ShapeError
from nn_kernels import conv as conv_ops
from nn_kernels import functional as F
from nn_kernels.base_layer import Layer
from nn_kernels.tensor import BatchNormParams, Tensor

logger = logging.getLogger(__name__)


def fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """U[-1/sqrt(fan_in), 1/sqrt(fan_in)]"""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Layer):
    """最后一维上的全连接"""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str = "linear", dtype=np.float32):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        self.weight = Tensor(fan_in_uniform(rng, (c_in, c_out), c_in, dtype), name="weight")
        self.bias = Tensor(fan_in_uniform(rng, (c_out,), c_in, dtype), name="bias")
        self._x = None

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, **kwargs):
        self._x = x
        return F.linear(x, self.weight.data, self.bias.data)

    def backward(self, dy):
        dx, dw, db = F.linear_backward(dy, self._x, self.weight.data)
        self.weight.accumulate(dw.astype(self.weight.dtype, copy=False))
        self.bias.accumulate(db.astype(self.bias.dtype, copy=False))
        return dx

    def output_shape(self, input_shape):
        if input_shape[-1] != self.c_in:
            raise ShapeError(f"{self.name}: 输入最后一维 {input_shape[-1]} != {self.c_in}")
        return tuple(input_shape[:-1]) + (self.c_out,)


class BatchNorm(Layer):
    """
    批归一化层
    axis 为通道轴：点特征 (..., C) 用 -1，卷积特征 (B, C, ...) 用 1
    """

    def __init__(self, channels: int, axis: int = -1, momentum: float = 0.99, eps: float = 1e-5,
                 name: str = "bn", dtype=np.float32):
        super().__init__(name)
        self.axis = axis
        self.params = BatchNormParams.create(channels, momentum, eps, dtype=dtype, name=name)
        self._cache = None

    def parameters(self) -> Dict[str, Tensor]:
        return {"gamma": self.params.gamma, "beta": self.params.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.params.running_mean, "running_var": self.params.running_var}

    def set_buffer(self, key, value):
        current = self.buffers()[key]
        if current.shape != value.shape:
            raise ShapeError(f"{self.name}.{key}: 形状 {value.shape} 与模型 {current.shape} 不一致")
        current[...] = value

    def _cast_buffers(self, dtype):
        self.params.running_mean = self.params.running_mean.astype(dtype)
        self.params.running_var = self.params.running_var.astype(dtype)

    def forward(self, x, mask: Optional[np.ndarray] = None, **kwargs):
        mode = "train" if self.training else "eval"
        y, self._cache = F.batchnorm(x, self.params, mode=mode, axis=self.axis, mask=mask)
        return y.astype(x.dtype, copy=False)

    def backward(self, dy):
        dx, dgamma, dbeta = F.batchnorm_backward(dy, self.params, self._cache)
        self.params.gamma.accumulate(dgamma.astype(self.params.gamma.dtype, copy=False))
        self.params.beta.accumulate(dbeta.astype(self.params.beta.dtype, copy=False))
        return dx.astype(dy.dtype, copy=False)

    def output_shape(self, input_shape):
        return tuple(input_shape)


class ReLU(Layer):
    def __init__(self, name: str = "relu"):
        super().__init__(name)
        self._x = None

    def forward(self, x, **kwargs):
        self._x = x
        return F.relu(x)

    def backward(self, dy):
        return F.relu_backward(dy, self._x)

    def output_shape(self, input_shape):
        return tuple(input_shape)


class Conv(Layer):
    """N 维卷积层，输入 (B, C_in, *S)"""

    def __init__(self, ndim: int, c_in: int, c_out: int, kernel, stride=1, padding=0,
                 rng: Optional[np.random.Generator] = None, name: str = "conv", dtype=np.float32):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ndim = ndim
        self.c_in, self.c_out = c_in, c_out
        self.kernel = conv_ops._expand(kernel, ndim, "kernel")
        self.stride = conv_ops._expand(stride, ndim, "stride")
        self.padding = conv_ops._expand(padding, ndim, "padding")
        fan_in = c_in * int(np.prod(self.kernel))
        self.weight = Tensor(fan_in_uniform(rng, (c_out, c_in) + self.kernel, fan_in, dtype), name="weight")
        self.bias = Tensor(fan_in_uniform(rng, (c_out,), fan_in, dtype), name="bias")
        self._x = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, **kwargs):
        self._x = x
        return conv_ops.conv_nd(x, self.weight.data, self.bias.data, self.stride, self.padding).astype(x.dtype, copy=False)

    def backward(self, dy):
        dx, dw, db = conv_ops.conv_nd_backward(dy, self._x, self.weight.data, self.stride, self.padding)
        self.weight.accumulate(dw.astype(self.weight.dtype, copy=False))
        self.bias.accumulate(db.astype(self.bias.dtype, copy=False))
        return dx.astype(dy.dtype, copy=False)

    def output_shape(self, input_shape):
        if len(input_shape) != self.ndim + 2 or input_shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: 输入形状 {tuple(input_shape)} 与 (B, {self.c_in}, ...) 不符")
        spatial = conv_ops.conv_output_shape(input_shape[2:], self.kernel, self.stride, self.padding)
        return (input_shape[0], self.c_out) + spatial


class Deconv(Layer):
    """N 维转置卷积层，权重 (C_in, C_out, *K)"""

    def __init__(self, ndim: int, c_in: int, c_out: int, kernel, stride=1, padding=0,
                 rng: Optional[np.random.Generator] = None, name: str = "deconv", dtype=np.float32):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.ndim = ndim
        self.c_in, self.c_out = c_in, c_out
        self.kernel = conv_ops._expand(kernel, ndim, "kernel")
        self.stride = conv_ops._expand(stride, ndim, "stride")
        self.padding = conv_ops._expand(padding, ndim, "padding")
        fan_in = c_in * int(np.prod(self.kernel))
        self.weight = Tensor(fan_in_uniform(rng, (c_in, c_out) + self.kernel, fan_in, dtype), name="weight")
        self.bias = Tensor(fan_in_uniform(rng, (c_out,), fan_in, dtype), name="bias")
        self._x = None

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x, **kwargs):
        self._x = x
        return conv_ops.deconv_nd(x, self.weight.data, self.bias.data, self.stride, self.padding).astype(x.dtype, copy=False)

    def backward(self, dy):
        dx, dw, db = conv_ops.deconv_nd_backward(dy, self._x, self.weight.data, self.stride, self.padding)
        self.weight.accumulate(dw.astype(self.weight.dtype, copy=False))
        self.bias.accumulate(db.astype(self.bias.dtype, copy=False))
        return dx.astype(dy.dtype, copy=False)

    def output_shape(self, input_shape):
        if len(input_shape) != self.ndim + 2 or input_shape[1] != self.c_in:
            raise ShapeError(f"{self.name}: 输入形状 {tuple(input_shape)} 与 (B, {self.c_in}, ...) 不符")
        spatial = conv_ops.deconv_output_shape(input_shape[2:], self.kernel, self.stride, self.padding)
        return (input_shape[0], self.c_out) + spatial


def conv_bn_relu(ndim: int, c_in: int, c_out: int, kernel, stride, padding, rng: np.random.Generator,
                 momentum: float, eps: float, name: str, deconv: bool = False) -> Sequence[Layer]:
    """卷积（或转置卷积）+ BN + ReLU 三层"""
    op = Deconv if deconv else Conv
    return [
        op(ndim, c_in, c_out, kernel, stride, padding, rng=rng, name=name),
        BatchNorm(c_out, axis=1, momentum=momentum, eps=eps, name=f"{name}_bn"),
        ReLU(name=f"{name}_relu"),
    ]
