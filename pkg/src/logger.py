"""Logging for the routing-aligned MoE toolkit: one named logger plus metric-line helpers."""

import logging
import sys
import time
from contextlib import contextmanager
from typing import Iterator, List, Optional, Union

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logger(
    name: str = "ra_moe",
    level: Union[str, int] = "INFO",
    log_file: Optional[str] = None,
) -> logging.Logger:
    """Set up the toolkit logger.

    Args:
        name: Logger name
        level: Level name (DEBUG, INFO, WARNING, ERROR, CRITICAL) or number
        log_file: Optional file that receives the same records as stdout

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(level.upper() if isinstance(level, str) else level)

    # Reconfiguring replaces handlers instead of stacking them
    logger.handlers.clear()

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def format_metrics(**values: Union[int, float, None]) -> str:
    """``key=value`` pairs for training log lines; floats get four decimals, None is skipped."""
    parts = []
    for key, value in values.items():
        if value is None:
            continue
        parts.append(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}")
    return " ".join(parts)


@contextmanager
def timed(label: str) -> Iterator[None]:
    """Log how long the block took; nothing is logged if it raises."""
    started = time.perf_counter()
    yield
    logger.info(f"{label} finished in {time.perf_counter() - started:.1f}s")


logger = setup_logger()
