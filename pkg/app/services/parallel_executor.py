import asyncio
import logging
from datetime import datetime
from typing import Any, Callable, List, Sequence

from app.services.interfaces import BaseParallelExecutor

logger = logging.getLogger(__name__)


class ParallelExecutor(BaseParallelExecutor):
    """在线程中并行执行互相独立的 CPU 任务（例如各客户端的本地训练）"""

    def __init__(self, parallelism: int = 1):
        """
        Args:
            parallelism: 同时运行的任务上限
        """
        if parallelism < 1:
            raise ValueError(f"parallelism must be at least 1, got {parallelism}")
        self.parallelism = parallelism

    async def map(self, fn: Callable[[Any], Any], items: Sequence[Any], label: str = "job") -> List[Any]:
        """
        对每个元素执行 fn

        Returns:
            List[Any]: 与 items 顺序一致的结果列表，与调度顺序无关
        """
        if not items:
            return []
        semaphore = asyncio.Semaphore(self.parallelism)
        tasks = [
            asyncio.create_task(self._run_one(semaphore, fn, item, f"{label}[{i}]"))
            for i, item in enumerate(items)
        ]
        try:
            return await asyncio.gather(*tasks)
        except Exception as e:
            logger.error(f"Error in parallel execution of {label}: {str(e)}")
            for task in tasks:
                task.cancel()
            raise

    async def _run_one(self, semaphore: asyncio.Semaphore, fn: Callable[[Any], Any], item: Any, name: str) -> Any:
        async with semaphore:
            start_time = datetime.now()
            result = await asyncio.to_thread(fn, item)
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.debug(f"{name} executed in {execution_time:.2f} seconds")
            return result
