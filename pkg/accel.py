"""
JIT 加速封装
numba 可用时编译热点循环，否则退回纯 Python 执行（结果一致，只是更慢）
"""

import logging

logger = logging.getLogger(__name__)

try:
    from numba import njit
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    logger.warning("numba 未安装，热点循环将以纯 Python 运行")

    def njit(*args, **kwargs):
        """无 numba 时的空装饰器"""
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator

__all__ = ["njit", "HAS_NUMBA"]
