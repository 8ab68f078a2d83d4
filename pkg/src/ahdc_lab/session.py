"""Run directory management: identity, lock file, stage directories and provenance."""

from __future__ import annotations

import json
import logging
import os
import shutil
from pathlib import Path

from ahdc_lab.config import resolve_config, run_id
from ahdc_lab.errors import MissingArtifactError, RunLockedError
from ahdc_lab.models import ExperimentConfig

logger = logging.getLogger("ahdc_lab")

LOCK_NAME = ".ahdc.lock"
RESOLVED_CONFIG_NAME = "resolved_config.json"


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class RunDirectory:
    """One experiment's output directory.

    A run is identified by a hash of its resolved configuration. Only one
    process may hold a run directory at a time; the lock file records the
    holder's pid and run id, and a lock left behind by a dead process is
    taken over with a warning.

    Usable as a context manager that acquires and releases the lock.
    """

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.root = Path(cfg.output_dir)
        self.run_id = run_id(cfg)
        self._locked = False

    @property
    def lock_path(self) -> Path:
        return self.root / LOCK_NAME

    @property
    def config_path(self) -> Path:
        return self.root / RESOLVED_CONFIG_NAME

    def path(self, stage: str) -> Path:
        """Directory of *stage*; it may not exist yet."""
        return self.root / stage

    def acquire(self) -> None:
        """Take the run lock.

        Raises:
            RunLockedError: If a live process already holds it.
        """
        self.root.mkdir(parents=True, exist_ok=True)
        payload = json.dumps({"pid": os.getpid(), "run_id": self.run_id})
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            holder = self._read_lock()
            pid = holder.get("pid")
            if isinstance(pid, int) and pid != os.getpid() and _pid_alive(pid):
                raise RunLockedError(
                    f"Output directory {self.root} is locked by process {pid} (run {holder.get('run_id')})"
                ) from None
            logger.warning("Taking over stale lock %s (holder %s)", self.lock_path, holder or "unknown")
            self.lock_path.write_text(payload)
        else:
            with os.fdopen(fd, "w") as f:
                f.write(payload)
        self._locked = True

    def _read_lock(self) -> dict:
        try:
            data = json.loads(self.lock_path.read_text())
        except (OSError, ValueError):
            return {}
        return data if isinstance(data, dict) else {}

    def release(self) -> None:
        if self._locked:
            self.lock_path.unlink(missing_ok=True)
            self._locked = False

    def __enter__(self) -> RunDirectory:
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def write_resolved_config(self) -> Path:
        """Write ``resolved_config.json``, warning when it replaces a different configuration."""
        text = resolve_config(self.cfg)
        if self.config_path.exists():
            previous = self.config_path.read_text()
            if previous != text:
                logger.warning(
                    "Resolved config in %s differs from the previous run; upstream stage outputs may be stale",
                    self.root,
                )
        self.config_path.write_text(text)
        return self.config_path

    def stage_dir(self, stage: str) -> Path:
        """Create a fresh output directory for *stage*.

        Raises:
            ValueError: If the directory already holds outputs and ``force`` is off.
        """
        path = self.path(stage)
        if path.exists() and any(path.iterdir()):
            if not self.force:
                raise ValueError(f"Refusing to overwrite existing outputs in {path} (use --force)")
            logger.info("Removing previous outputs in %s", path)
            shutil.rmtree(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def require(self, stage: str, *names: str) -> Path:
        """Directory of an upstream *stage*, checking that *names* exist in it.

        Raises:
            MissingArtifactError: Naming the first missing artifact.
        """
        path = self.path(stage)
        for name in names:
            if not (path / name).exists():
                raise MissingArtifactError(f"Missing upstream artifact {path / name}; run the '{stage}' stage first")
        return path
