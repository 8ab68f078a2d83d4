"""Tests for stage orchestration and parameter studies."""

from __future__ import annotations

import dataclasses
import json
from unittest import mock

import pytest

from ahdc_lab.config import load_config
from ahdc_lab.errors import MissingArtifactError
from ahdc_lab.pipeline import (
    ANALYZE,
    BUILD_MATCHED,
    EVAL,
    STUDY_COLUMNS,
    SYNTH,
    TRAIN_BAI,
    TRAIN_HDC,
    Pipeline,
    run_study,
    study_variants,
)
from ahdc_lab.session import LOCK_NAME, RESOLVED_CONFIG_NAME
from ahdc_lab.tensorio import read_csv


@pytest.fixture
def cfg(smoke_yaml):
    return load_config(smoke_yaml)


def _summary(dsc: float) -> dict:
    return {
        "n": 2,
        "dsc": {"mean": dsc, "std": 0.0},
        "ji": {"mean": dsc / 2, "std": 0.0},
        "asd": {"mean": 1.5, "std": 0.0},
        "excluded": [],
        "featcorr_mean": 0.25,
    }


class TestPipelineSession:
    def test_enter_writes_config_and_lock(self, cfg):
        with Pipeline(cfg) as pipeline:
            assert (cfg.output_dir / LOCK_NAME).exists()
            resolved = json.loads((cfg.output_dir / RESOLVED_CONFIG_NAME).read_text())
            assert resolved["seed"] == 0
            assert pipeline.run.run_id
        assert not (cfg.output_dir / LOCK_NAME).exists()


class TestSynthStage:
    def test_writes_domains(self, cfg):
        with Pipeline(cfg) as pipeline:
            out = pipeline.synth()
            d1, d2 = pipeline.domains()
        assert out == cfg.output_dir / SYNTH
        for name in ("domain_a.json", "domain_b.json", "oracle.json", "pairing.json", "stage.log"):
            assert (out / name).exists()
        assert d1.counts.n_labelled == 2
        assert d2.counts.n_labelled == 0
        assert len(d1.test()) == 2

    def test_rerun_needs_force(self, cfg):
        with Pipeline(cfg) as pipeline:
            pipeline.synth()
        with Pipeline(cfg) as pipeline, pytest.raises(ValueError, match="use --force"):
            pipeline.synth()
        with Pipeline(cfg, force=True) as pipeline:
            pipeline.synth()

    def test_oracle_tensors(self, cfg):
        with Pipeline(cfg) as pipeline:
            pipeline.synth()
            x_a, target = pipeline.oracle_tensors()
        assert x_a.shape == (2, 1, 32, 32)
        assert target.shape == (2, 1, 32, 32)

    def test_no_oracle_before_synth(self, cfg):
        with Pipeline(cfg) as pipeline:
            assert pipeline.oracle_tensors() is None

    def test_manifest_source_rejected(self, cfg, tmp_path):
        manifests = dataclasses.replace(
            cfg.data, source="manifests", manifest_a=tmp_path / "a.json", manifest_b=tmp_path / "b.json"
        )
        with Pipeline(dataclasses.replace(cfg, data=manifests)) as pipeline:
            with pytest.raises(ValueError, match="data.source = 'synth'"):
                pipeline.synth()

    def test_manifest_source_reads_files(self, cfg, tmp_path):
        with Pipeline(cfg) as pipeline:
            pipeline.synth()
        synth_dir = cfg.output_dir / SYNTH
        manifests = dataclasses.replace(
            cfg.data,
            source="manifests",
            manifest_a=synth_dir / "domain_a.json",
            manifest_b=synth_dir / "domain_b.json",
        )
        other = dataclasses.replace(cfg, data=manifests, output_dir=tmp_path / "other")
        with Pipeline(other) as pipeline:
            d1, d2 = pipeline.domains()
            assert pipeline.oracle_tensors() is None
        assert d1.name == "domain_a"
        assert len(d2) == 10


class TestMissingUpstream:
    def test_train_bai_before_synth(self, cfg):
        with Pipeline(cfg) as pipeline, pytest.raises(MissingArtifactError, match="run the 'synth' stage first"):
            pipeline.train_bai()

    def test_build_matched_before_train_bai(self, cfg):
        with Pipeline(cfg) as pipeline:
            pipeline.synth()
            with pytest.raises(MissingArtifactError, match="missing checkpoint"):
                pipeline.build_matched()

    def test_eval_before_train_hdc(self, cfg):
        with Pipeline(cfg) as pipeline, pytest.raises(MissingArtifactError, match="missing checkpoint"):
            pipeline.evaluate()

    def test_unknown_analysis(self, cfg):
        with Pipeline(cfg) as pipeline, pytest.raises(ValueError, match="Unknown analysis 'tsne'"):
            pipeline.analyze("tsne")


class TestResumePoint:
    def test_nothing_to_resume(self, cfg):
        with Pipeline(cfg) as pipeline:
            assert pipeline._resume_point(TRAIN_BAI) is None

    def test_latest_epoch(self, cfg):
        ckpt_dir = cfg.output_dir / TRAIN_BAI / "checkpoints"
        ckpt_dir.mkdir(parents=True)
        (ckpt_dir / "epoch_0000.ckpt").touch()
        (ckpt_dir / "epoch_0003.ckpt").touch()
        with Pipeline(cfg) as pipeline:
            assert pipeline._resume_point(TRAIN_BAI) == ckpt_dir / "epoch_0003.ckpt"

    def test_finished_stage(self, cfg):
        ckpt_dir = cfg.output_dir / TRAIN_HDC / "checkpoints"
        ckpt_dir.mkdir(parents=True)
        (ckpt_dir / "final.ckpt").touch()
        with Pipeline(cfg) as pipeline, pytest.raises(ValueError, match="already finished"):
            pipeline._resume_point(TRAIN_HDC)


class TestStudyVariants:
    def test_names_and_overrides(self, cfg):
        variants = study_variants(cfg)
        assert [name for name, _ in variants] == ["ratio0.25_patch4_ow0_seed0", "ratio0.25_patch4_ow0.1_seed0"]
        _, second = variants[1]
        assert second.hdc.lambda_ow == 0.1
        assert second.data.label_ratio == 0.25
        assert second.nets.patch_size == 4
        assert second.output_dir == cfg.output_dir / "study" / "ratio0.25_patch4_ow0.1_seed0"

    def test_grid_is_cartesian(self, cfg):
        study = dataclasses.replace(cfg.study, label_ratios=[0.25, 0.5], seeds=[0, 1, 2])
        assert len(study_variants(dataclasses.replace(cfg, study=study))) == 2 * 2 * 3

    def test_run_study_tabulates(self, cfg):
        results = iter([_summary(0.5), _summary(0.75)])
        with mock.patch.object(Pipeline, "run_all", side_effect=lambda: next(results)):
            path = run_study(cfg)
        rows = read_csv(path)
        assert path == cfg.output_dir / "study" / "study.csv"
        assert list(rows[0]) == STUDY_COLUMNS
        assert [r["variant"] for r in rows] == ["ratio0.25_patch4_ow0_seed0", "ratio0.25_patch4_ow0.1_seed0"]
        assert [float(r["dsc_mean"]) for r in rows] == [0.5, 0.75]
        assert (cfg.output_dir / "study" / "ratio0.25_patch4_ow0_seed0" / RESOLVED_CONFIG_NAME).exists()


@pytest.mark.slow
class TestEndToEnd:
    def test_run_all(self, cfg):
        with Pipeline(cfg) as pipeline:
            result = pipeline.run_all()
        root = cfg.output_dir
        assert (root / TRAIN_BAI / "checkpoints" / "final.ckpt").exists()
        assert (root / TRAIN_BAI / "oracle.csv").exists()
        assert (root / BUILD_MATCHED / "pairing.json").exists()
        assert (root / TRAIN_HDC / "losses.csv").exists()
        assert (root / EVAL / "report.csv").exists()
        assert (root / EVAL / "summary.json").exists()
        assert (root / EVAL / "domain_b" / "summary.json").exists()
        assert (root / ANALYZE / "pca" / "pca.csv").exists()
        assert (root / ANALYZE / "featcorr" / "featcorr.csv").exists()
        assert len(list((root / ANALYZE / "divergence" / "maps").iterdir())) == 2
        assert result["n"] + len(result["excluded"]) == 2
        assert 0.0 <= result["featcorr_mean"] <= 1.0

    def test_pca_groups(self, cfg):
        with Pipeline(cfg) as pipeline:
            pipeline.run_all()
        rows = read_csv(cfg.output_dir / ANALYZE / "pca" / "pca.csv")
        groups = {r["domain"] for r in rows}
        assert groups == {"domain_a", "domain_b", "domain_a->domain_b", "domain_b->domain_a"}

    def test_single_net_skips_featcorr(self, cfg):
        single = dataclasses.replace(cfg, hdc=dataclasses.replace(cfg.hdc, single_net=True))
        with Pipeline(single) as pipeline:
            result = pipeline.run_all()
        assert result["featcorr_mean"] is None
        assert not (cfg.output_dir / ANALYZE / "featcorr").exists()

    def test_study(self, cfg):
        path = run_study(cfg)
        rows = read_csv(path)
        assert len(rows) == 2
