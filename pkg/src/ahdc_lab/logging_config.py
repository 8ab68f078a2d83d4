"""Logging for experiment runs: Rich console output plus per-stage log files."""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Iterator
from pathlib import Path

from rich.logging import RichHandler

from ahdc_lab import display
from ahdc_lab.models import LoggingConfig

LOGGER_NAME = "ahdc_lab"
STAGE_LOG_NAME = "stage.log"
FILE_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _level(name: str, default: int) -> int:
    level = logging.getLevelName(name.upper())
    return level if isinstance(level, int) else default


def _file_handler(path: Path, level: int) -> logging.FileHandler:
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    return handler


def setup_logging(config: LoggingConfig | None = None) -> logging.Logger:
    """Configure the ``ahdc_lab`` logger for one CLI invocation.

    Console records go through the shared display console so they print above
    any live training progress bar. ``config.file``, when set, receives every
    record at DEBUG level. Previous handlers are closed and replaced.

    Returns:
        The package logger.
    """
    config = config or LoggingConfig()
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console_handler = RichHandler(
        console=display.console,
        show_time=True,
        show_path=False,
        markup=True,
        rich_tracebacks=True,
    )
    console_handler.setLevel(_level(config.level, logging.INFO))
    logger.addHandler(console_handler)

    if config.file:
        logger.addHandler(_file_handler(Path(config.file), logging.DEBUG))
    return logger


def add_stage_log_handler(stage_dir: Path, level: str = "DEBUG") -> logging.Handler:
    """Start writing ``<stage_dir>/stage.log``; pair with :func:`remove_stage_log_handler`."""
    handler = _file_handler(Path(stage_dir) / STAGE_LOG_NAME, _level(level, logging.DEBUG))
    logging.getLogger(LOGGER_NAME).addHandler(handler)
    return handler


def remove_stage_log_handler(handler: logging.Handler) -> None:
    logging.getLogger(LOGGER_NAME).removeHandler(handler)
    handler.close()


@contextlib.contextmanager
def stage_log(stage_dir: Path, level: str = "DEBUG") -> Iterator[Path]:
    """Capture the package's records in the stage's log file while the block runs."""
    handler = add_stage_log_handler(stage_dir, level)
    try:
        yield Path(stage_dir) / STAGE_LOG_NAME
    finally:
        remove_stage_log_handler(handler)
