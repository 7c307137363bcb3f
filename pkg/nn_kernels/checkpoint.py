"""
权重文件读写
格式（小端）：magic "VXPC"，版本 u32，条目数 u32；
每个条目：名称长度 u16 + UTF-8 名称，维数 u8，各维 u32，float32 数据
"""

import os
import struct
import logging
from typing import Dict, Optional, Tuple

import numpy as np

from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"VXPC"
VERSION = 1
META_PREFIX = "__meta__."

_HEADER = struct.Struct("<4sII")


def save_checkpoint(path: str, state: Dict[str, np.ndarray], meta: Optional[Dict[str, float]] = None) -> None:
    """
    写出权重文件（先写临时文件再替换）

    Args:
        path: 目标路径
        state: 名称到数组的映射
        meta: 额外标量（如 step、epoch），以 __meta__. 前缀存为 1 元素数组
    """
    entries = dict(state)
    for key, value in (meta or {}).items():
        entries[f"{META_PREFIX}{key}"] = np.array([value], dtype=np.float32)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(entries)))
        for name, value in entries.items():
            raw_name = name.encode("utf-8")
            array = np.ascontiguousarray(value, dtype="<f4")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<B", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes())
    os.replace(tmp_path, path)
    logger.info(f"权重已保存: {path} ({len(entries)} 项)")


def _read(raw: bytes, offset: int, fmt: str) -> Tuple[tuple, int]:
    size = struct.calcsize(fmt)
    if offset + size > len(raw):
        raise CheckpointError("文件被截断", offset)
    return struct.unpack_from(fmt, raw, offset), offset + size


def load_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, float]]:
    """
    读取权重文件

    Args:
        path: 文件路径

    Returns:
        (state, meta)
    """
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"无法读取权重文件 {path}: {e}") from e
    (magic, version, count), offset = _read(raw, 0, "<4sII")
    if magic != MAGIC:
        raise CheckpointError(f"文件头 {magic!r} 不是权重文件", 0)
    if version != VERSION:
        raise CheckpointError(f"不支持的版本 {version}", 4)
    state: Dict[str, np.ndarray] = {}
    meta: Dict[str, float] = {}
    for _ in range(count):
        (name_len,), offset = _read(raw, offset, "<H")
        if offset + name_len > len(raw):
            raise CheckpointError("名称被截断", offset)
        try:
            name = raw[offset:offset + name_len].decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"名称不是合法 UTF-8: {e}", offset) from e
        offset += name_len
        (ndim,), offset = _read(raw, offset, "<B")
        shape, offset = _read(raw, offset, f"<{ndim}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{name}: 数据被截断", offset)
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"{name}: 含非有限值", offset - nbytes)
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX):]] = float(data.reshape(-1)[0])
        else:
            state[name] = data.astype(np.float32)
    if offset != len(raw):
        raise CheckpointError(f"文件末尾有 {len(raw) - offset} 字节多余数据", offset)
    logger.info(f"读取权重 {path}: {len(state)} 项")
    return state, meta
