"""Console and file logging for the ``pf`` command line."""

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional


def setup_logging(level: str = "INFO", log_dir: Optional[str] = None) -> logging.Logger:
    """
    Configure the ``peftlab`` logger with console and optional file handlers.

    The console handler writes to stderr at ``level``; when ``log_dir`` is
    given, a timestamped file receives everything from DEBUG up.

    Returns:
        logging.Logger: Configured package logger
    """
    logger = logging.getLogger("peftlab")
    logger.setLevel(logging.DEBUG)

    # Clear existing handlers
    logger.handlers.clear()
    logger.propagate = False

    # Console handler - level from settings
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, level.upper(), logging.INFO))
    console_handler.setFormatter(logging.Formatter(
        '%(asctime)s | %(levelname)-8s | %(message)s',
        datefmt='%H:%M:%S'
    ))
    logger.addHandler(console_handler)

    if log_dir:
        # File handler - detailed logs
        directory = Path(log_dir)
        directory.mkdir(parents=True, exist_ok=True)
        log_filename = directory / f"pf_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        file_handler = logging.FileHandler(log_filename, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            '%(asctime)s | %(levelname)-8s | %(name)s:%(funcName)s:%(lineno)d | %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        logger.addHandler(file_handler)

    return logger
