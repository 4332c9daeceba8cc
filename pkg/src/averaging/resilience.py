"""Retry patterns for randomized sampling."""
import logging
from functools import wraps
from typing import Callable, Tuple, Type, Union

from tenacity import (
    retry,
    stop_after_attempt,
    retry_if_exception_type,
    before_sleep_log,
)

from averaging.errors import RetrySampling

logger = logging.getLogger(__name__)


def resample(
    max_attempts: int = 50,
    on: Union[Type[BaseException], Tuple[Type[BaseException], ...]] = RetrySampling,
) -> Callable:
    """Decorator that re-draws a sample when it raises `on`.

    The wrapped function must take its randomness from a generator that
    persists across calls, so each attempt sees fresh draws while the whole
    sequence stays deterministic for a fixed seed. The last error is
    re-raised once attempts are exhausted.
    """
    def decorator(func: Callable) -> Callable:
        @retry(
            stop=stop_after_attempt(max_attempts),
            retry=retry_if_exception_type(on),
            before_sleep=before_sleep_log(logger, logging.DEBUG),
            reraise=True,
        )
        @wraps(func)
        def wrapper(*args, **kwargs):
            return func(*args, **kwargs)
        return wrapper
    return decorator
