import asyncio
import functools
import time
from typing import Any, Callable, Type, Tuple
import logging

logger = logging.getLogger(__name__)


def retry(
    retries: int = 3,
    exceptions: Tuple[Type[Exception], ...] = (Exception,),
) -> Callable:
    """同步重试装饰器

    被装饰函数每次调用都应重新抽样（例如继续消耗同一个随机数生成器）。

    Args:
        retries: 失败后最多重试的次数
        exceptions: 需要重试的异常类型
    """
    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            for attempt in range(retries + 1):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    if attempt == retries:
                        logger.error(f"Final retry attempt failed: {str(e)}")
                        raise
                    logger.debug(f"Attempt {attempt + 1}/{retries} failed: {str(e)}. Retrying...")
        return wrapper
    return decorator


def monitor_performance(service: str, operation: str) -> Callable:
    """性能监控装饰器，同时支持普通函数和协程

    Args:
        service: 服务名称
        operation: 操作名称
    """
    def decorator(func: Callable) -> Callable:
        if asyncio.iscoroutinefunction(func):
            @functools.wraps(func)
            async def async_wrapper(*args: Any, **kwargs: Any) -> Any:
                start_time = time.perf_counter()
                try:
                    result = await func(*args, **kwargs)
                except Exception as e:
                    logger.error(f"Error in {service}.{operation}: {type(e).__name__}: {str(e)}")
                    raise
                logger.info(f"Performance: {service}.{operation} completed in {time.perf_counter() - start_time:.3f}s")
                return result
            return async_wrapper

        @functools.wraps(func)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.error(f"Error in {service}.{operation}: {type(e).__name__}: {str(e)}")
                raise
            logger.info(f"Performance: {service}.{operation} completed in {time.perf_counter() - start_time:.3f}s")
            return result
        return wrapper
    return decorator
