"""
张量与参数容器
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ShapeError


@dataclass
class Tensor:
    """稠密 n 维数组加可选梯度槽"""

    data: np.ndarray
    grad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise ShapeError(f"{self.name}: 梯度形状 {self.grad.shape} 与数据 {self.data.shape} 不一致")

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, grad: np.ndarray) -> None:
        """把梯度累加到 grad 槽"""
        if grad.shape != self.data.shape:
            raise ShapeError(f"{self.name}: 梯度形状 {grad.shape} 与数据 {self.data.shape} 不一致")
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
        else:
            self.grad += grad

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        if self.grad is not None:
            self.grad = self.grad.astype(dtype)


@dataclass
class BatchNormParams:
    """批归一化参数：scale/shift 可训练，running 统计量随训练更新"""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5
    num_batches: int = field(default=0)

    @classmethod
    def create(cls, channels: int, momentum: float = 0.99, eps: float = 1e-5,
               dtype=np.float32, name: str = "bn") -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )

    def astype(self, dtype) -> None:
        self.gamma.astype(dtype)
        self.beta.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
