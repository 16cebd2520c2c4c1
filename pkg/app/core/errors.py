from typing import Optional


class MpcpaError(Exception):
    """模拟器所有错误的基类"""


class RejectedInputError(MpcpaError, ValueError):
    """输入不满足操作前置条件"""


class ConfigurationError(MpcpaError, ValueError):
    """实验配置无法执行"""


class ConfigValidationError(ConfigurationError):
    """配置校验失败，携带出错字段的路径"""

    def __init__(self, field: str, message: str):
        self.field = field
        self.detail = message
        super().__init__(f"{field}: {message}" if field else message)


class TrainingDivergedError(MpcpaError, ArithmeticError):
    """训练过程中出现非有限参数"""


class ProtocolError(MpcpaError, RuntimeError):
    """服务端状态机被非法驱动"""


class ArtifactError(MpcpaError, OSError):
    """运行产物缺失或损坏"""

    def __init__(self, path: str, message: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message or 'missing or corrupt artifact'}")
