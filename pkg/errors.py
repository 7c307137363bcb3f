"""
异常定义
管线各模块共用的异常类型，CLI 据此映射退出码
"""

from typing import Optional


class VoxelPipeError(Exception):
    """管线异常基类"""

    exit_code = 1


class InvariantError(VoxelPipeError):
    """内部不变式被破坏（重复坐标、非零填充行等）"""

    exit_code = 1


class DivergenceError(VoxelPipeError):
    """训练损失出现非有限值"""

    exit_code = 1


class ConfigError(VoxelPipeError):
    """配置错误（体素尺寸不整除、键值非法等）"""

    exit_code = 2


class ShapeError(VoxelPipeError, ValueError):
    """张量形状不匹配或输出尺寸非正"""

    exit_code = 1


class CalibrationError(VoxelPipeError):
    """标定矩阵不可用（如 rect 奇异）"""

    exit_code = 3


class PointCloudFormatError(VoxelPipeError):
    """velodyne 二进制文件格式错误"""

    exit_code = 3


class VoxelDumpError(VoxelPipeError):
    """体素缓冲导出文件格式错误"""

    exit_code = 3


class LabelParseError(VoxelPipeError):
    """标签文件解析失败"""

    exit_code = 3

    def __init__(self, message: str, line_number: int):
        super().__init__(f"第 {line_number} 行: {message}")
        self.line_number = line_number


class CheckpointError(VoxelPipeError):
    """权重文件读取失败"""

    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (文件偏移 {offset})"
        super().__init__(message)
        self.offset = offset
