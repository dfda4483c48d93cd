"""
Centralized logging configuration for the PGS toolkit.
"""
import logging
from typing import Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(level: Union[int, str, None] = None) -> None:
    """
    Configure logging for the application.

    Args:
        level: Logging level; defaults to ``settings.log_level`` (PGS_LOG_LEVEL)
    """
    if level is None:
        from .config import settings
        level = settings.log_level
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO

    root = logging.getLogger()
    if not root.hasHandlers():
        logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=DATE_FORMAT)
    else:
        root.setLevel(level)


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance with the given name.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Configured logger instance
    """
    if not logging.getLogger().hasHandlers():
        setup_logging()
    return logging.getLogger(name)
