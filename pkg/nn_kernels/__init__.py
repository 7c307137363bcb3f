"""
最小可微核函数模块
每个算子都有前向与反向，并可用有限差分校验
"""

from .tensor import Tensor, BatchNormParams
from .base_layer import Layer, Sequential
from .layers import Linear, BatchNorm, ReLU, Conv, Deconv, conv_bn_relu
from .grad_check import grad_check, GradCheckReport
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = [
    'Tensor',
    'BatchNormParams',
    'Layer',
    'Sequential',
    'Linear',
    'BatchNorm',
    'ReLU',
    'Conv',
    'Deconv',
    'conv_bn_relu',
    'grad_check',
    'GradCheckReport',
    'save_checkpoint',
    'load_checkpoint',
]
