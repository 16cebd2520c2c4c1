import hashlib
from typing import Any

import numpy as np


def derive_seed(global_seed: int, *keys: Any) -> int:
    """由全局种子和键序列派生独立的 64 位种子

    同一组 (global_seed, keys) 总是得到同一个种子，新增客户端不会扰动其他客户端的随机流。
    """
    material = repr((int(global_seed),) + tuple(keys)).encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(global_seed: int, *keys: Any) -> np.random.Generator:
    """派生种子并构造随机数生成器"""
    return np.random.default_rng(derive_seed(global_seed, *keys))
