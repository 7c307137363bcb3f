"""
N 维卷积与转置卷积
互相关约定（不翻转卷积核）、零填充；实现为对卷积核偏移的循环，每个偏移做一次跨步切片加 tensordot，
累加顺序固定，结果与线程数无关
"""

import itertools
import logging
from typing import Sequence, Tuple, Union

import numpy as np

from errors import ShapeError

logger = logging.getLogger(__name__)

IntOrTuple = Union[int, Sequence[int]]


def _expand(value: IntOrTuple, ndim: int, what: str) -> Tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * ndim
    value = tuple(int(v) for v in value)
    if len(value) != ndim:
        raise ShapeError(f"{what} 需要 {ndim} 个值，实际 {value}")
    return value


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """floor((in + 2p - k) / s) + 1，非正时报错"""
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"卷积输出尺寸非正: in={size} k={kernel} s={stride} p={padding}")
    return out


def deconv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """(in - 1) s - 2p + k"""
    out = (size - 1) * stride - 2 * padding + kernel
    if out < 1:
        raise ShapeError(f"转置卷积输出尺寸非正: in={size} k={kernel} s={stride} p={padding}")
    return out


def conv_output_shape(spatial: Sequence[int], kernel: IntOrTuple, stride: IntOrTuple,
                      padding: IntOrTuple) -> Tuple[int, ...]:
    ndim = len(spatial)
    k, s, p = _expand(kernel, ndim, "kernel"), _expand(stride, ndim, "stride"), _expand(padding, ndim, "padding")
    return tuple(conv_output_extent(n, k[i], s[i], p[i]) for i, n in enumerate(spatial))


def deconv_output_shape(spatial: Sequence[int], kernel: IntOrTuple, stride: IntOrTuple,
                        padding: IntOrTuple) -> Tuple[int, ...]:
    ndim = len(spatial)
    k, s, p = _expand(kernel, ndim, "kernel"), _expand(stride, ndim, "stride"), _expand(padding, ndim, "padding")
    return tuple(deconv_output_extent(n, k[i], s[i], p[i]) for i, n in enumerate(spatial))


def _window(offset: Sequence[int], stride: Sequence[int], out: Sequence[int]) -> Tuple[slice, ...]:
    """某个卷积核偏移在填充后输入上覆盖的跨步切片（前两维为 batch 与通道）"""
    return (slice(None), slice(None)) + tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out)
    )


def _check_conv_inputs(x: np.ndarray, weight: np.ndarray, in_axis: int):
    if x.ndim != weight.ndim:
        raise ShapeError(f"输入 {x.shape} 需为 (B, C, ...)，权重 {weight.shape} 维数不一致")
    if x.shape[1] != weight.shape[in_axis]:
        raise ShapeError(f"输入通道 {x.shape[1]} 与权重 {weight.shape} 不匹配")


def conv_nd(x: np.ndarray, weight: np.ndarray, bias, stride: IntOrTuple = 1, padding: IntOrTuple = 0) -> np.ndarray:
    """
    N 维卷积

    Args:
        x: (B, C_in, *S)
        weight: (C_out, C_in, *K)
        bias: (C_out,) 或 None
        stride: 步长
        padding: 零填充

    Returns:
        (B, C_out, *S_out)
    """
    _check_conv_inputs(x, weight, 1)
    ndim = x.ndim - 2
    kernel = weight.shape[2:]
    s, p = _expand(stride, ndim, "stride"), _expand(padding, ndim, "padding")
    out = conv_output_shape(x.shape[2:], kernel, s, p)
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))
    acc = np.zeros((weight.shape[0], x.shape[0]) + out, dtype=np.result_type(x, weight))
    for offset in itertools.product(*(range(k) for k in kernel)):
        patch = xp[_window(offset, s, out)]
        acc += np.tensordot(weight[(slice(None), slice(None)) + offset], patch, axes=([1], [1]))
    y = np.moveaxis(acc, 0, 1)
    if bias is not None:
        y = y + bias.reshape((1, -1) + (1,) * ndim)
    return y


def conv_nd_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: IntOrTuple = 1,
                     padding: IntOrTuple = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回 (dx, dW, db)"""
    ndim = x.ndim - 2
    kernel = weight.shape[2:]
    s, p = _expand(stride, ndim, "stride"), _expand(padding, ndim, "padding")
    out = dy.shape[2:]
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((q, q) for q in p))
    dxp = np.zeros_like(xp, dtype=np.result_type(dy, weight))
    dw = np.zeros_like(weight, dtype=np.result_type(dy, x))
    reduce_axes = [0] + list(range(2, 2 + ndim))
    for offset in itertools.product(*(range(k) for k in kernel)):
        window = _window(offset, s, out)
        w_slice = (slice(None), slice(None)) + offset
        dw[w_slice] = np.tensordot(dy, xp[window], axes=(reduce_axes, reduce_axes))
        dxp[window] += np.moveaxis(np.tensordot(weight[w_slice], dy, axes=([0], [1])), 0, 1)
    crop = (slice(None), slice(None)) + tuple(slice(q, q + n) for q, n in zip(p, x.shape[2:]))
    db = dy.sum(axis=tuple(reduce_axes))
    return dxp[crop], dw, db


def deconv_nd(x: np.ndarray, weight: np.ndarray, bias, stride: IntOrTuple = 1, padding: IntOrTuple = 0) -> np.ndarray:
    """
    N 维转置卷积（conv_nd 对输入的伴随）

    Args:
        x: (B, C_in, *S)
        weight: (C_in, C_out, *K)
        bias: (C_out,) 或 None

    Returns:
        (B, C_out, *S_out)，S_out = (S - 1) s - 2p + k
    """
    _check_conv_inputs(x, weight, 0)
    ndim = x.ndim - 2
    kernel = weight.shape[2:]
    s, p = _expand(stride, ndim, "stride"), _expand(padding, ndim, "padding")
    out = deconv_output_shape(x.shape[2:], kernel, s, p)
    full = tuple((n - 1) * st + k for n, st, k in zip(x.shape[2:], s, kernel))
    acc = np.zeros((x.shape[0], weight.shape[1]) + full, dtype=np.result_type(x, weight))
    for offset in itertools.product(*(range(k) for k in kernel)):
        contrib = np.tensordot(weight[(slice(None), slice(None)) + offset], x, axes=([0], [1]))
        acc[_window(offset, s, x.shape[2:])] += np.moveaxis(contrib, 0, 1)
    crop = (slice(None), slice(None)) + tuple(slice(q, q + n) for q, n in zip(p, out))
    y = acc[crop]
    if bias is not None:
        y = y + bias.reshape((1, -1) + (1,) * ndim)
    return y


def deconv_nd_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: IntOrTuple = 1,
                       padding: IntOrTuple = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回 (dx, dW, db)"""
    ndim = x.ndim - 2
    kernel = weight.shape[2:]
    s, p = _expand(stride, ndim, "stride"), _expand(padding, ndim, "padding")
    full = tuple((n - 1) * st + k for n, st, k in zip(x.shape[2:], s, kernel))
    dfull = np.zeros(dy.shape[:2] + full, dtype=dy.dtype)
    dfull[(slice(None), slice(None)) + tuple(slice(q, q + n) for q, n in zip(p, dy.shape[2:]))] = dy
    dx = np.zeros_like(x, dtype=np.result_type(dy, weight))
    dw = np.zeros_like(weight, dtype=np.result_type(dy, x))
    reduce_axes = [0] + list(range(2, 2 + ndim))
    for offset in itertools.product(*(range(k) for k in kernel)):
        patch = dfull[_window(offset, s, x.shape[2:])]
        w_slice = (slice(None), slice(None)) + offset
        dx += np.moveaxis(np.tensordot(weight[w_slice], patch, axes=([1], [1])), 0, 1)
        dw[w_slice] = np.tensordot(x, patch, axes=(reduce_axes, reduce_axes))
    db = dy.sum(axis=tuple(reduce_axes))
    return dx, dw, db


def conv3d(x, weight, bias=None, stride: IntOrTuple = 1, padding: IntOrTuple = 0):
    """(B, C, D, H, W) 三维卷积"""
    if x.ndim != 5:
        raise ShapeError(f"conv3d 输入需为 5 维，实际 {x.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def conv2d(x, weight, bias=None, stride: IntOrTuple = 1, padding: IntOrTuple = 0):
    """(B, C, H, W) 二维卷积"""
    if x.ndim != 4:
        raise ShapeError(f"conv2d 输入需为 4 维，实际 {x.shape}")
    return conv_nd(x, weight, bias, stride, padding)


def deconv2d(x, weight, bias=None, stride: IntOrTuple = 1, padding: IntOrTuple = 0):
    """(B, C, H, W) 二维转置卷积"""
    if x.ndim != 4:
        raise ShapeError(f"deconv2d 输入需为 4 维，实际 {x.shape}")
    return deconv_nd(x, weight, bias, stride, padding)


def upsample_params(factor: float) -> Tuple[str, int, int, int]:
    """
    把上采样倍数换算为 (算子, 卷积核, 步长, 填充)

    倍数 f >= 2 用转置卷积 k=2f, s=f, p=f/2；f == 1 用 3x3 转置卷积；f == 1/2 用步长 2 的 3x3 卷积
    """
    if factor == 1:
        return "deconv", 3, 1, 1
    if factor == 0.5:
        return "conv", 3, 2, 1
    f = int(factor)
    if f != factor or f < 2 or f % 2:
        raise ShapeError(f"不支持的上采样倍数: {factor}")
    return "deconv", 2 * f, f, f // 2
