"""Runtime settings discovered from the environment or a ``.env`` file.

``AHDC_THREADS`` sizes the worker pools used for synthetic data generation
and metric scoring. It is looked up in the process environment first, then
in ``.env`` in the working directory; invalid values are skipped with a
warning. Without a valid value the CPU count is used. The tensor library's
own thread count is left alone.
"""

from __future__ import annotations

import logging
import os
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

THREADS_VAR = "AHDC_THREADS"
DOTENV_NAME = ".env"


def read_dotenv(path: Path) -> dict[str, str]:
    """``KEY=value`` pairs of a dotenv file.

    Blank lines, ``#`` comments and lines without ``=`` are skipped; an
    ``export`` prefix and one pair of matching quotes around the value are
    removed.
    """
    values: dict[str, str] = {}
    for raw_line in path.read_text().splitlines():
        line = raw_line.strip()
        if line.startswith("export "):
            line = line[len("export ") :].lstrip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        key, _, value = (part.strip() for part in line.partition("="))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        if key:
            values[key] = value
    return values


def _sources(dotenv: Path) -> Iterator[tuple[str, Mapping[str, str]]]:
    yield "environment", os.environ
    if dotenv.is_file():
        try:
            yield str(dotenv), read_dotenv(dotenv)
        except (OSError, ValueError):
            logger.debug("Could not read %s", dotenv, exc_info=True)


def positive_int(name: str, dotenv: Path = Path(DOTENV_NAME)) -> int | None:
    """First valid positive integer for *name* along the source chain, or None."""
    for source, values in _sources(dotenv):
        raw = values.get(name)
        if not raw:
            continue
        try:
            value = int(raw)
        except ValueError:
            logger.warning("%s=%r from %s is not an integer; ignoring", name, raw, source)
            continue
        if value < 1:
            logger.warning("%s=%d from %s must be positive; ignoring", name, value, source)
            continue
        return value
    return None


@dataclass(frozen=True)
class Settings:
    threads: int

    @classmethod
    def discover(cls, dotenv: Path = Path(DOTENV_NAME)) -> Settings:
        threads = positive_int(THREADS_VAR, dotenv)
        return cls(threads=threads if threads is not None else max(1, os.cpu_count() or 1))


#: Settings of this process, resolved at import time.
ENV = Settings.discover()
