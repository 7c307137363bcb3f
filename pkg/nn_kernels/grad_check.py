"""
有限差分梯度检查
中心差分 (f(x+h) - f(x-h)) / 2h 与解析梯度比较，报告最大相对误差
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """梯度检查结果"""

    max_rel_error: float = 0.0
    max_abs_error: float = 0.0
    checked: int = 0
    tol: float = 1e-4
    worst: Optional[Tuple[int, Tuple[int, ...]]] = None
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def summary(self) -> str:
        status = "通过" if self.passed else "失败"
        return f"{status}: 检查 {self.checked} 项，最大相对误差 {self.max_rel_error:.3e} (阈值 {self.tol:.0e})"


def relative_error(analytic: float, numeric: float, floor: float = 1e-2) -> float:
    """|a - n| / max(|a|, |n|, floor)，floor 防止在梯度接近 0 处放大舍入误差"""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(op: Callable[[], float], inputs: Sequence[np.ndarray], analytic: Sequence[np.ndarray],
               h: float = 1e-6, tol: float = 1e-4, max_entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None, floor: float = 1e-2) -> GradCheckReport:
    """
    对 inputs 中的每个数组逐元素做中心差分

    Args:
        op: 无参可调用对象，读取 inputs（原地扰动）并返回标量
        inputs: 被扰动的数组（应为 float64，且就是 op 实际读取的对象）
        analytic: 与 inputs 一一对应的解析梯度
        h: 差分步长
        tol: 最大相对误差阈值
        max_entries: 每个输入最多抽查的元素数，None 表示全部
        rng: 抽查用随机数发生器
        floor: 相对误差分母下限

    Returns:
        GradCheckReport
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tol=tol)
    for input_id, (array, grad) in enumerate(zip(inputs, analytic)):
        if array.shape != grad.shape:
            raise ValueError(f"输入 {input_id} 形状 {array.shape} 与梯度 {grad.shape} 不一致")
        total = array.size
        if max_entries is not None and total > max_entries:
            flat_ids = rng.choice(total, size=max_entries, replace=False)
        else:
            flat_ids = np.arange(total)
        worst_here = 0.0
        for flat in flat_ids:
            index = np.unravel_index(int(flat), array.shape)
            original = array[index]
            array[index] = original + h
            f_plus = float(op())
            array[index] = original - h
            f_minus = float(op())
            array[index] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            value = float(grad[index])
            rel = relative_error(value, numeric, floor)
            report.checked += 1
            report.max_abs_error = max(report.max_abs_error, abs(value - numeric))
            worst_here = max(worst_here, rel)
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (input_id, tuple(int(i) for i in index))
        report.per_input.append(worst_here)
    logger.debug(report.summary())
    return report
