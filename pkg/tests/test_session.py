"""Tests for run directory management."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from unittest import mock

import pytest

from ahdc_lab.errors import MissingArtifactError, RunLockedError
from ahdc_lab.models import ExperimentConfig
from ahdc_lab.session import LOCK_NAME, RESOLVED_CONFIG_NAME, RunDirectory


@pytest.fixture
def cfg(tmp_path) -> ExperimentConfig:
    return dataclasses.replace(ExperimentConfig(), output_dir=tmp_path / "run")


class TestRunIdentity:
    def test_run_id_deterministic(self, cfg):
        assert RunDirectory(cfg).run_id == RunDirectory(cfg).run_id

    def test_run_id_is_12_hex_chars(self, cfg):
        run_id = RunDirectory(cfg).run_id
        assert len(run_id) == 12
        assert all(c in "0123456789abcdef" for c in run_id)

    def test_run_id_changes_with_config(self, cfg):
        other = dataclasses.replace(cfg, seed=cfg.seed + 1)
        assert RunDirectory(cfg).run_id != RunDirectory(other).run_id


class TestLock:
    def test_acquire_writes_pid(self, cfg):
        run = RunDirectory(cfg)
        run.acquire()
        holder = json.loads((cfg.output_dir / LOCK_NAME).read_text())
        assert holder == {"pid": os.getpid(), "run_id": run.run_id}
        run.release()
        assert not (cfg.output_dir / LOCK_NAME).exists()

    def test_context_manager_releases(self, cfg):
        with RunDirectory(cfg) as run:
            assert run.lock_path.exists()
        assert not run.lock_path.exists()

    def test_context_manager_releases_on_error(self, cfg):
        with pytest.raises(RuntimeError), RunDirectory(cfg) as run:
            raise RuntimeError("boom")
        assert not run.lock_path.exists()

    def test_live_holder_refused(self, cfg):
        cfg.output_dir.mkdir(parents=True)
        (cfg.output_dir / LOCK_NAME).write_text(json.dumps({"pid": 424242, "run_id": "abc"}))
        with mock.patch("ahdc_lab.session._pid_alive", return_value=True):
            with pytest.raises(RunLockedError, match="locked by process 424242"):
                RunDirectory(cfg).acquire()

    def test_stale_lock_taken_over(self, cfg, caplog):
        cfg.output_dir.mkdir(parents=True)
        (cfg.output_dir / LOCK_NAME).write_text(json.dumps({"pid": 424242, "run_id": "abc"}))
        with (
            mock.patch("ahdc_lab.session._pid_alive", return_value=False),
            caplog.at_level(logging.WARNING, logger="ahdc_lab"),
        ):
            run = RunDirectory(cfg)
            run.acquire()
        assert "stale lock" in caplog.text
        assert json.loads(run.lock_path.read_text())["pid"] == os.getpid()

    def test_unreadable_lock_taken_over(self, cfg):
        cfg.output_dir.mkdir(parents=True)
        (cfg.output_dir / LOCK_NAME).write_text("not json")
        run = RunDirectory(cfg)
        run.acquire()
        assert json.loads(run.lock_path.read_text())["pid"] == os.getpid()

    def test_release_without_acquire_keeps_foreign_lock(self, cfg):
        cfg.output_dir.mkdir(parents=True)
        (cfg.output_dir / LOCK_NAME).write_text("{}")
        RunDirectory(cfg).release()
        assert (cfg.output_dir / LOCK_NAME).exists()


class TestResolvedConfig:
    def test_written(self, cfg):
        run = RunDirectory(cfg)
        run.root.mkdir(parents=True)
        path = run.write_resolved_config()
        assert path.name == RESOLVED_CONFIG_NAME
        assert json.loads(path.read_text())["seed"] == cfg.seed

    def test_warns_when_config_changes(self, cfg, caplog):
        RunDirectory(cfg).root.mkdir(parents=True)
        RunDirectory(cfg).write_resolved_config()
        with caplog.at_level(logging.WARNING, logger="ahdc_lab"):
            RunDirectory(dataclasses.replace(cfg, seed=9)).write_resolved_config()
        assert "differs" in caplog.text

    def test_same_config_is_quiet(self, cfg, caplog):
        RunDirectory(cfg).root.mkdir(parents=True)
        RunDirectory(cfg).write_resolved_config()
        with caplog.at_level(logging.WARNING, logger="ahdc_lab"):
            RunDirectory(cfg).write_resolved_config()
        assert "differs" not in caplog.text


class TestStageDirectories:
    def test_creates_fresh(self, cfg):
        path = RunDirectory(cfg).stage_dir("synth")
        assert path == cfg.output_dir / "synth"
        assert path.is_dir()

    def test_empty_dir_reused(self, cfg):
        (cfg.output_dir / "synth").mkdir(parents=True)
        assert RunDirectory(cfg).stage_dir("synth").is_dir()

    def test_refuses_overwrite(self, cfg):
        (cfg.output_dir / "synth").mkdir(parents=True)
        (cfg.output_dir / "synth" / "domain_a.json").write_text("[]")
        with pytest.raises(ValueError, match="Refusing to overwrite existing outputs .* \\(use --force\\)"):
            RunDirectory(cfg).stage_dir("synth")

    def test_force_clears(self, cfg):
        (cfg.output_dir / "synth").mkdir(parents=True)
        (cfg.output_dir / "synth" / "domain_a.json").write_text("[]")
        path = RunDirectory(cfg, force=True).stage_dir("synth")
        assert list(path.iterdir()) == []

    def test_require_missing(self, cfg):
        with pytest.raises(MissingArtifactError, match="run the 'train-bai' stage first"):
            RunDirectory(cfg).require("train-bai", "checkpoints/final.ckpt")

    def test_require_present(self, cfg):
        (cfg.output_dir / "synth").mkdir(parents=True)
        (cfg.output_dir / "synth" / "domain_a.json").write_text("[]")
        assert RunDirectory(cfg).require("synth", "domain_a.json") == cfg.output_dir / "synth"
