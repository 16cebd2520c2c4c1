from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, List, Optional, Sequence


class BaseArtifactStore(ABC):
    """序列化模型的登记处接口"""
    @abstractmethod
    def register(self, name: str, kind: str, blob: bytes) -> None:
        """登记一个序列化模型"""
        pass

    @abstractmethod
    def get(self, name: str) -> bytes:
        """取回序列化模型"""
        pass

    @abstractmethod
    def names(self, kind: Optional[str] = None) -> List[str]:
        """列出已登记的模型"""
        pass


class BaseClient(ABC):
    """协议中的客户端：只以字节形式收发模型"""
    @abstractmethod
    def train_denoiser(self) -> bytes:
        """在本地数据上训练去噪器并返回其序列化结果"""
        pass

    @abstractmethod
    def receive_package(self, blob: bytes) -> None:
        """接收其他客户端的去噪器包"""
        pass

    @abstractmethod
    def train_classifier(self) -> bytes:
        """在本地真实数据与生成数据的并集上训练分类器"""
        pass


class BaseServer(ABC):
    """协议中的服务端：串行处理上传并记账"""
    @abstractmethod
    def receive_denoiser(self, k: int, blob: bytes) -> None:
        pass

    @abstractmethod
    def distribute(self) -> Dict[int, bytes]:
        pass

    @abstractmethod
    def receive_classifier(self, k: int, blob: bytes) -> None:
        pass


class BaseParallelExecutor(ABC):
    """并行执行器接口"""
    @abstractmethod
    async def map(self, fn: Callable[[Any], Any], items: Sequence[Any], label: str = "job") -> List[Any]:
        """并行执行 fn 并按提交顺序返回结果"""
        pass
