import copy
import os
import logging
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import yaml
from dotenv import load_dotenv

from app.core.errors import ConfigurationError

logger = logging.getLogger(__name__)

MAX_INCLUDE_DEPTH = 16


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """递归合并映射，override 中的键优先；列表整体替换"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class ConfigLoader:
    def __init__(self, base_dir: str = "app/instances"):
        # 获取工作目录的绝对路径
        root_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
        self.base_dir = os.path.normpath(os.path.join(root_dir, base_dir))

    def _resolve_path(self, path: str) -> str:
        """解析路径：绝对路径或存在的相对路径原样使用，否则相对于 base_dir"""
        if os.path.isabs(path):
            return os.path.normpath(path)
        if os.path.exists(path):
            return os.path.abspath(path)
        base_name = os.path.basename(self.base_dir)
        if path.startswith(base_name + os.sep):
            path = path[len(base_name) + 1:]
        return os.path.normpath(os.path.join(self.base_dir, path))

    @lru_cache(maxsize=32)
    def _load_yaml(self, file_path: str) -> Dict[str, Any]:
        """加载单个 YAML 文件，使用 LRU 缓存（调用方拿到的是副本）"""
        try:
            with open(file_path, "r", encoding="utf-8") as f:
                content = f.read()
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {file_path}")
        if content.startswith("\ufeff"):
            content = content[1:]
        try:
            config = yaml.safe_load(content)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"invalid YAML in {file_path}: {e}")
        if config is None:
            return {}
        if not isinstance(config, dict):
            raise ConfigurationError(f"{file_path} must contain a mapping at the top level")
        return config

    def _apply_env_overrides(self, config: Dict[str, Any]) -> Dict[str, Any]:
        """应用环境变量覆盖配置：路径 a.b.c 对应 CONFIG_A_B_C"""

        def process_value(key: str, value: Any) -> Any:
            env_key = f"CONFIG_{key.upper()}"
            if isinstance(value, dict):
                return {k: process_value(f"{key}_{k}", v) for k, v in value.items()}
            elif isinstance(value, list):
                return value  # 列表暂时不支持环境变量覆盖
            env_value = os.getenv(env_key)
            if env_value is None:
                return value
            logger.info(f"Overriding config value {key} with environment variable {env_key}")
            # 尝试转换环境变量值为原始值的类型
            try:
                if isinstance(value, bool):
                    return env_value.lower() in ("true", "1", "yes")
                elif isinstance(value, int):
                    return int(env_value)
                elif isinstance(value, float):
                    return float(env_value)
                elif value is None:
                    return yaml.safe_load(env_value)
                return env_value
            except ValueError:
                raise ConfigurationError(f"{env_key}={env_value!r} cannot be converted to {type(value).__name__}")

        return {k: process_value(k, v) for k, v in config.items()}

    def _load_with_includes(self, path: str, chain: Tuple[str, ...]) -> Dict[str, Any]:
        if path in chain:
            raise ConfigurationError(f"include cycle: {' -> '.join(chain + (path,))}")
        if len(chain) >= MAX_INCLUDE_DEPTH:
            raise ConfigurationError(f"includes nested deeper than {MAX_INCLUDE_DEPTH} levels at {path}")
        config = copy.deepcopy(self._load_yaml(path))
        includes = config.pop("includes", None) or []
        if not isinstance(includes, list):
            raise ConfigurationError(f"includes in {path} must be a list")
        merged: Dict[str, Any] = {}
        base_dir = os.path.dirname(path)
        for include in includes:
            # 使用相对于当前配置文件的路径
            include_path = os.path.normpath(os.path.join(base_dir, include))
            logger.debug(f"Loading included config from: {include_path}")
            merged = deep_merge(merged, self._load_with_includes(include_path, chain + (path,)))
        return deep_merge(merged, config)

    def load_config(self, file_path: str, overrides: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """加载配置文件：展开 includes、合并 overrides、再应用环境变量覆盖"""
        load_dotenv()
        resolved_path = self._resolve_path(file_path)
        logger.info(f"Loading config from: {resolved_path}")
        config = self._load_with_includes(resolved_path, ())
        if overrides:
            config = deep_merge(config, overrides)
        return self._apply_env_overrides(config)

    def list_configs(self, subdir: str = "experiments") -> List[str]:
        directory = os.path.join(self.base_dir, subdir)
        if not os.path.isdir(directory):
            return []
        return sorted(os.path.join(directory, f) for f in os.listdir(directory) if f.endswith(".yaml"))

    def clear_cache(self) -> None:
        """清除配置缓存"""
        self._load_yaml.cache_clear()  # 清除 lru_cache
