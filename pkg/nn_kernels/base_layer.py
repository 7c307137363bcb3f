"""
网络层基类
定义所有层的通用接口：前向、反向、输出形状推算与参数访问
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, Iterable, List, Tuple

import numpy as np

from errors import CheckpointError, ShapeError
from nn_kernels.tensor import Tensor

# 日志配置
logger = logging.getLogger(__name__)


class Layer(ABC):
    """网络层基类"""

    def __init__(self, name: str = ""):
        """初始化基础层"""
        self.name = name or self.__class__.__name__
        self.training = True

    @abstractmethod
    def forward(self, x: np.ndarray, **kwargs) -> np.ndarray:
        """
        前向计算，并缓存反向所需的中间量

        Args:
            x: 输入

        Returns:
            输出
        """
        pass

    @abstractmethod
    def backward(self, dy: np.ndarray) -> np.ndarray:
        """
        反向计算：把参数梯度累加到各 Tensor 的 grad 槽

        Args:
            dy: 输出梯度

        Returns:
            输入梯度
        """
        pass

    @abstractmethod
    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """
        只根据形状推算输出形状（不做数值计算）

        Args:
            input_shape: 输入形状

        Returns:
            输出形状
        """
        pass

    def children(self) -> List["Layer"]:
        return []

    def parameters(self) -> Dict[str, Tensor]:
        """本层自身的可训练参数"""
        return {}

    def buffers(self) -> Dict[str, np.ndarray]:
        """本层自身的非训练状态（如 BN running 统计量）"""
        return {}

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        """递归收集参数，键为点分路径"""
        base = f"{prefix}{self.name}"
        result = {f"{base}.{key}": value for key, value in self.parameters().items()}
        for child in self.children():
            result.update(child.named_parameters(prefix=f"{base}."))
        return result

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        base = f"{prefix}{self.name}"
        result = {f"{base}.{key}": value for key, value in self.buffers().items()}
        for child in self.children():
            result.update(child.named_buffers(prefix=f"{base}."))
        return result

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        """按名称写回非训练状态，由子类实现"""
        raise KeyError(key)

    def train(self) -> "Layer":
        self.training = True
        for child in self.children():
            child.train()
        return self

    def eval(self) -> "Layer":
        self.training = False
        for child in self.children():
            child.eval()
        return self

    def zero_grad(self) -> None:
        for param in self.named_parameters().values():
            param.zero_grad()

    def astype(self, dtype) -> "Layer":
        """转换参数精度（梯度检查用 float64）"""
        for param in self.parameters().values():
            param.astype(dtype)
        self._cast_buffers(dtype)
        for child in self.children():
            child.astype(dtype)
        return self

    def _cast_buffers(self, dtype) -> None:
        pass

    def state_dict(self) -> Dict[str, np.ndarray]:
        """参数与非训练状态的扁平字典"""
        state = {key: param.data for key, param in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        按名称写回参数与状态

        Args:
            state: state_dict 格式的字典
            strict: 为 True 时缺少或多余的键都报错
        """
        params = self.named_parameters()
        buffer_owners = dict(self._buffer_owners())
        expected = set(params) | set(buffer_owners)
        missing = expected - set(state)
        if strict and missing:
            raise CheckpointError(f"权重缺少 {len(missing)} 项，例如 {sorted(missing)[:3]}")
        for key, value in state.items():
            if key in params:
                target = params[key]
                if target.shape != value.shape:
                    raise ShapeError(f"{key}: 形状 {value.shape} 与模型 {target.shape} 不一致")
                target.data = np.array(value, dtype=target.dtype)
            elif key in buffer_owners:
                layer, local = buffer_owners[key]
                layer.set_buffer(local, value)
            elif strict and not key.startswith("__meta__"):
                raise CheckpointError(f"权重中存在模型没有的项: {key}")

    def _buffer_owners(self, prefix: str = "") -> Iterable[Tuple[str, Tuple["Layer", str]]]:
        base = f"{prefix}{self.name}"
        for key in self.buffers():
            yield f"{base}.{key}", (self, key)
        for child in self.children():
            yield from child._buffer_owners(prefix=f"{base}.")


class Sequential(Layer):
    """顺序容器，反向时逆序传播"""

    def __init__(self, layers: List[Layer], name: str = ""):
        super().__init__(name)
        self.layers = list(layers)
        # 子层名在容器内唯一
        for i, layer in enumerate(self.layers):
            layer.name = f"{i}_{layer.name}"

    def children(self) -> List[Layer]:
        return self.layers

    def forward(self, x: np.ndarray, **kwargs) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def output_shape(self, input_shape):
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape
