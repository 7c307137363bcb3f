"""
环境变量管理器
负责加载 .env、读取 VOXELPIPE_* 变量并覆盖配置
"""

import os
import logging
from typing import Any, Dict, Optional

from dotenv import find_dotenv, load_dotenv

from config import PipelineConfig

# 日志配置
logger = logging.getLogger(__name__)

# 加载环境变量
dotenv_path = find_dotenv(filename='.env', raise_error_if_not_found=False, usecwd=True)
if dotenv_path:
    logger.info(f"从 {dotenv_path} 加载环境变量")
    load_dotenv(dotenv_path)
else:
    logger.debug("未找到.env文件，仅使用系统环境变量")


def _optional_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"环境变量 {name}={raw!r} 不是整数，已忽略")
        return None


class EnvManager:
    """环境变量管理器类"""

    def __init__(self):
        """初始化环境变量管理器"""
        self.seed = _optional_int("VOXELPIPE_SEED")
        self.threads = _optional_int("VOXELPIPE_THREADS")
        self.log_level = os.getenv("VOXELPIPE_LOG_LEVEL", "INFO").upper()
        self.data_dir = os.getenv("VOXELPIPE_DATA_DIR")

    def apply_overrides(self, config: PipelineConfig) -> PipelineConfig:
        """
        用环境变量覆盖配置中的随机种子

        Args:
            config: 原配置

        Returns:
            覆盖后的新配置（原配置不变）
        """
        if self.seed is None:
            return config
        logger.info(f"VOXELPIPE_SEED={self.seed} 覆盖配置种子 {config.seed}")
        voxel = config.voxel.model_copy(update={"rng_seed": self.seed})
        return config.model_copy(update={"seed": self.seed, "voxel": voxel})

    def resolve_threads(self, cli_threads: Optional[int] = None) -> int:
        """
        确定工作线程数，命令行参数优先

        Args:
            cli_threads: --threads 参数

        Returns:
            线程数 (>= 1)
        """
        threads = cli_threads or self.threads or 1
        return max(1, int(threads))

    def get_all_configs(self) -> Dict[str, Any]:
        """获取所有环境配置"""
        return {
            "seed": self.seed,
            "threads": self.threads,
            "log_level": self.log_level,
            "data_dir": self.data_dir,
        }

    def print_status(self) -> None:
        """打印环境变量配置状态"""
        logger.info("环境变量配置状态:")
        for key, value in self.get_all_configs().items():
            logger.info(f"- {key}: {value if value is not None else '未设置'}")


# 单例模式
_env_manager_instance = None


def get_env_manager() -> EnvManager:
    """
    获取环境变量管理器实例

    Returns:
        EnvManager实例
    """
    global _env_manager_instance
    if _env_manager_instance is None:
        _env_manager_instance = EnvManager()
    return _env_manager_instance


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    get_env_manager().print_status()
