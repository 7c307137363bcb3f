"""
逐元素与规约类核函数
每个前向函数返回输出和反向所需的缓存，*_backward 由上游梯度计算各输入梯度
"""

import logging
from typing import Optional, Tuple

import numpy as np

from errors import ShapeError
from nn_kernels.tensor import BatchNormParams

logger = logging.getLogger(__name__)


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """
    最后一维上的仿射变换 y = x W + b，前导维广播

    Args:
        x: (..., c_in)
        weight: (c_in, c_out)
        bias: (c_out,)

    Returns:
        (..., c_out)
    """
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: 输入最后一维 {x.shape[-1]} 与权重 {weight.shape} 不匹配")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: 偏置形状 {bias.shape} 与权重 {weight.shape} 不匹配")
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回 (dx, dW, db)"""
    c_in, c_out = weight.shape
    dx = dy @ weight.T
    dw = x.reshape(-1, c_in).T @ dy.reshape(-1, c_out)
    db = dy.reshape(-1, c_out).sum(axis=0)
    return dx, dw, db


def _channels_last(x: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(x, axis, -1)


def batchnorm(x: np.ndarray, params: BatchNormParams, mode: str = "train", axis: int = -1,
              mask: Optional[np.ndarray] = None):
    """
    批归一化

    train 模式下按除通道轴外的所有轴统计均值与（有偏）方差，并以 momentum 更新 running 统计量：
    running = momentum * running + (1 - momentum) * batch。
    mask 给出参与统计的位置（形状为 x 去掉通道轴），未参与的位置同样被归一化但不影响统计量。

    Args:
        x: 输入
        params: BN 参数
        mode: "train" 或 "eval"
        axis: 通道轴
        mask: 统计总体掩码

    Returns:
        (y, cache)
    """
    xc = _channels_last(x, axis)
    channels = xc.shape[-1]
    if params.gamma.shape != (channels,):
        raise ShapeError(f"batchnorm: 通道数 {channels} 与参数 {params.gamma.shape} 不匹配")
    flat = xc.reshape(-1, channels)
    if mode == "train":
        sel = None if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
        population = flat if sel is None else flat[sel]
        if population.shape[0] < 2:
            raise ShapeError(f"batchnorm: 训练模式需要至少 2 个样本，实际 {population.shape[0]}")
        mean = population.mean(axis=0)
        var = population.var(axis=0)
        params.running_mean[...] = params.momentum * params.running_mean + (1.0 - params.momentum) * mean
        params.running_var[...] = params.momentum * params.running_var + (1.0 - params.momentum) * var
        params.num_batches += 1
    elif mode == "eval":
        sel = None
        mean = params.running_mean
        var = params.running_var
    else:
        raise ValueError(f"未知的 BN 模式: {mode}")
    inv_std = 1.0 / np.sqrt(var + params.eps)
    xhat = (flat - mean) * inv_std
    y = xhat * params.gamma.data + params.beta.data
    y = np.moveaxis(y.reshape(xc.shape), -1, axis)
    cache = (mode, xhat, inv_std, sel, xc.shape, axis)
    return y, cache


def batchnorm_backward(dy: np.ndarray, params: BatchNormParams, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    批归一化反向，返回 (dx, dgamma, dbeta)

    train 模式下统计量依赖于参与统计的位置，梯度公式对这些位置多出两项修正
    """
    mode, xhat, inv_std, sel, shape_last, axis = cache
    channels = shape_last[-1]
    dflat = _channels_last(dy, axis).reshape(-1, channels)
    dgamma = (dflat * xhat).sum(axis=0)
    dbeta = dflat.sum(axis=0)
    dxhat = dflat * params.gamma.data
    dx = dxhat * inv_std
    if mode == "train":
        count = xhat.shape[0] if sel is None else int(sel.sum())
        sum_dxhat = dxhat.sum(axis=0)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=0)
        correction = (sum_dxhat + xhat * sum_dxhat_xhat) * (inv_std / count)
        if sel is None:
            dx = dx - correction
        else:
            dx = dx - correction * sel[:, None]
    dx = np.moveaxis(dx.reshape(shape_last), -1, axis)
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def maxpool_over_axis(x: np.ndarray, axis: int, mask: Optional[np.ndarray] = None):
    """
    沿一个轴逐元素取最大值

    mask 与 x 去掉最后一维的形状一致（如 VFE 中的 (K, T)），未占用位置以 -inf 参与比较，
    因此永远不会被选中；整段都未占用时输出 0。

    Args:
        x: 输入
        axis: 规约轴
        mask: 占用掩码

    Returns:
        (y, cache)，cache 记录最大值位置（并列时取最前者）
    """
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)[..., None]
        x = np.where(keep, x, -np.inf)
    arg = np.argmax(x, axis=axis)
    y = np.take_along_axis(x, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    empty = ~np.isfinite(y)
    if mask is not None and empty.any():
        y = np.where(empty, 0.0, y).astype(x.dtype)
    return y, (arg, x.shape, axis, empty)


def maxpool_backward(dy: np.ndarray, cache) -> np.ndarray:
    """把梯度送回最大值所在位置"""
    arg, shape, axis, empty = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    np.put_along_axis(dx, np.expand_dims(arg, axis), np.expand_dims(np.where(empty, 0.0, dy), axis), axis=axis)
    return dx


def sigmoid(x: np.ndarray) -> np.ndarray:
    """数值稳定的 sigmoid"""
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax2(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """
    长度为 2 的轴上的 softmax

    Args:
        logits: 该轴长度为 2
        axis: softmax 轴

    Returns:
        与输入同形状的概率，沿 axis 和为 1
    """
    if logits.shape[axis] != 2:
        raise ShapeError(f"softmax2: 轴 {axis} 长度必须为 2，实际 {logits.shape[axis]}")
    first, second = np.split(logits, 2, axis=axis)
    p_second = sigmoid(second - first)
    return np.concatenate([1.0 - p_second, p_second], axis=axis)


def softmax2_backward(dp: np.ndarray, probs: np.ndarray, axis: int = 0) -> np.ndarray:
    inner = (dp * probs).sum(axis=axis, keepdims=True)
    return probs * (dp - inner)


def bce_loss(p: np.ndarray, target: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """概率形式的逐元素二元交叉熵"""
    p = np.clip(p, eps, 1.0 - eps)
    return -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))


def bce_loss_grad(p: np.ndarray, target: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    p = np.clip(p, eps, 1.0 - eps)
    return (p - target) / (p * (1.0 - p))


def bce_with_logits(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    """logit 形式的二元交叉熵：log(1 + e^x) - t x"""
    return np.logaddexp(0.0, logits) - target * logits


def bce_with_logits_grad(logits: np.ndarray, target: np.ndarray) -> np.ndarray:
    return sigmoid(logits) - target


def smooth_l1(u: np.ndarray, u_star: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """
    逐元素 SmoothL1：|d| < threshold 时为 0.5 d^2 / threshold，否则 |d| - 0.5 threshold

    Returns:
        与输入同形状的损失
    """
    d = np.abs(u - u_star)
    return np.where(d < threshold, 0.5 * d * d / threshold, d - 0.5 * threshold)


def smooth_l1_grad(u: np.ndarray, u_star: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """对 u 的梯度"""
    d = u - u_star
    return np.where(np.abs(d) < threshold, d / threshold, np.sign(d))
