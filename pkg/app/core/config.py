import logging
import os
from typing import Any, Dict, List, Optional

import yaml
from pydantic import ValidationError

from app.core.config_loader import ConfigLoader
from app.core.errors import ConfigValidationError
from app.models.experiments import ExperimentConfig

logger = logging.getLogger(__name__)

# 默认配置路径
DEFAULT_EXPERIMENTS_DIR = "experiments"

loader = ConfigLoader()


def _field_path(loc) -> str:
    return ".".join(str(part) for part in loc)


def validate_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    """把合并后的映射校验为 ExperimentConfig

    Raises:
        ConfigValidationError: 携带出错字段路径和可读的说明
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        cause = (first.get("ctx") or {}).get("error")
        if isinstance(cause, ConfigValidationError):
            raise ConfigValidationError(cause.field, cause.detail) from None
        field = _field_path(first["loc"]) or "config"
        logger.error(f"Invalid experiment config at {field}: {first['msg']}")
        raise ConfigValidationError(field, first["msg"]) from None


def load_experiment_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    加载并校验实验配置

    Args:
        path: YAML 路径，相对路径先相对当前目录解析，再相对 app/instances
        overrides: 在环境变量覆盖之前合并的额外键值（例如命令行的 --seed）

    Returns:
        ExperimentConfig: 校验后的配置
    """
    return validate_experiment_config(loader.load_config(path, overrides))


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


def config_to_yaml(config: ExperimentConfig) -> str:
    """配置回显：足以重新运行同一实验"""
    return yaml.safe_dump(config_to_dict(config), sort_keys=False, allow_unicode=True)


def list_experiment_configs() -> List[str]:
    return [os.path.splitext(os.path.basename(p))[0] for p in loader.list_configs(DEFAULT_EXPERIMENTS_DIR)]
