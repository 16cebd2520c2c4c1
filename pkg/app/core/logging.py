import os
import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Union

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(level: Union[str, None] = None):
    """配置日志系统

    Args:
        level: 显式日志级别，缺省时读取 LOG_LEVEL
    """
    log_level = level or os.getenv("LOG_LEVEL", "INFO")
    log_file = os.getenv("LOG_FILE", "mpcpa.log")
    log_dir = os.getenv("LOG_DIR", "logs")
    log_format = os.getenv("LOG_FORMAT", DEFAULT_FORMAT)

    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)
    log_file_path = log_path / log_file

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format=log_format,
        handlers=[
            # 文件处理器，支持日志轮转
            RotatingFileHandler(
                log_file_path,
                maxBytes=10*1024*1024,  # 10MB
                backupCount=5,
                encoding='utf-8'
            ),
            logging.StreamHandler()
        ]
    )

    # 服务模式下的第三方库
    logging.getLogger("httpx").setLevel(logging.WARNING)
    logging.getLogger("uvicorn").setLevel(logging.INFO)
    logging.getLogger("fastapi").setLevel(logging.INFO)

    logger = logging.getLogger(__name__)
    logger.info(f"Logging configured. Log file: {log_file_path}")


def attach_run_log(run_dir: Union[str, Path]) -> logging.Handler:
    """把 app.* 日志同时写入运行目录下的 run.log，返回处理器以便运行结束后移除"""
    handler = logging.FileHandler(Path(run_dir) / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter(os.getenv("LOG_FORMAT", DEFAULT_FORMAT)))
    logging.getLogger("app").addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    """移除并关闭运行日志处理器"""
    logging.getLogger("app").removeHandler(handler)
    handler.close()
