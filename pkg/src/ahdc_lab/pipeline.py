"""Stage orchestration: synth -> train-bai -> build-matched -> train-hdc -> eval -> analyze.

Each stage reads its inputs from upstream stage directories and writes into
``<output_dir>/<stage>/``; nothing is shared through memory, so any stage can
be rerun on its own.
"""

from __future__ import annotations

import contextlib
import dataclasses
import itertools
import logging
from collections.abc import Iterator
from pathlib import Path

import torch

from ahdc_lab.analysis import branch_divergence, feature_correlation, mean_correlation, pca_project, write_featcorr
from ahdc_lab.bai import TAG_1T2, TAG_2T1, MatchedDomains, build_matched_domains, train_bai
from ahdc_lab.checkpoint import latest_checkpoint, load_checkpoint
from ahdc_lab.config import validate_config
from ahdc_lab.dataset import images_to_tensor, normalize_image
from ahdc_lab.display import (
    display_dataset_counts,
    display_layer_values,
    display_stage_banner,
    display_study,
    display_summary,
)
from ahdc_lab.hdc import HdcState, load_hdc_state, train_hdc
from ahdc_lab.logging_config import stage_log
from ahdc_lab.metrics import evaluate_dataset
from ahdc_lab.models import DomainDataset, ExperimentConfig, Sample
from ahdc_lab.session import RunDirectory
from ahdc_lab.synthgen import DOMAIN_A, DOMAIN_B, ORACLE, gen_dataset, load_pairing
from ahdc_lab.tensorio import load_manifest, read_csv, sanitize_filename, save_tensor, write_csv

logger = logging.getLogger("ahdc_lab")

SYNTH = "synth"
TRAIN_BAI = "train-bai"
BUILD_MATCHED = "build-matched"
TRAIN_HDC = "train-hdc"
EVAL = "eval"
ANALYZE = "analyze"
ANALYSES = ("pca", "featcorr", "divergence")
STUDY = "study"

STUDY_COLUMNS = [
    "variant",
    "label_ratio",
    "patch_size",
    "lambda_ow",
    "seed",
    "dsc_mean",
    "ji_mean",
    "asd_mean",
    "featcorr_mean",
]


class Pipeline:
    """Runs the experiment stages for one configuration.

    Use as a context manager: entering takes the run-directory lock and
    writes ``resolved_config.json``.
    """

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.run = RunDirectory(cfg, force=force)

    def __enter__(self) -> Pipeline:
        self.run.acquire()
        try:
            self.run.write_resolved_config()
        except BaseException:
            self.run.release()
            raise
        logger.info("Run %s in %s", self.run.run_id, self.run.root)
        return self

    def __exit__(self, *exc) -> None:
        self.run.release()

    @contextlib.contextmanager
    def _stage(self, name: str, fresh: bool = True) -> Iterator[Path]:
        if fresh:
            path = self.run.stage_dir(name)
        else:
            path = self.run.path(name)
            path.mkdir(parents=True, exist_ok=True)
        display_stage_banner(name, self.run.run_id, path)
        with stage_log(path):
            yield path

    # -----------------------------------------------------------------------
    # Inputs
    # -----------------------------------------------------------------------

    def domains(self) -> tuple[DomainDataset, DomainDataset]:
        """The two source domains, from the synth stage or the configured manifests."""
        data = self.cfg.data
        if data.source == "manifests":
            return load_manifest(data.manifest_a), load_manifest(data.manifest_b)
        synth_dir = self.run.require(SYNTH, f"{DOMAIN_A}.json", f"{DOMAIN_B}.json")
        return load_manifest(synth_dir / f"{DOMAIN_A}.json"), load_manifest(synth_dir / f"{DOMAIN_B}.json")

    def oracle_tensors(self) -> tuple[torch.Tensor, torch.Tensor] | None:
        """``(x_a, T*(x_a))`` batches of the held-out oracle pairs, or None when there are none."""
        data = self.cfg.data
        if data.source == "manifests":
            if data.oracle_manifest is None:
                return None
            manifest = Path(data.oracle_manifest)
        else:
            manifest = self.run.path(SYNTH) / f"{ORACLE}.json"
        if not manifest.exists():
            return None
        pairing = load_pairing(manifest.parent / "pairing.json")
        if not pairing:
            return None
        oracle = load_manifest(manifest)
        sources = [oracle.get(row["a"]) for row in pairing]
        targets = [oracle.get(row["b"]) for row in pairing]
        return images_to_tensor(sources), images_to_tensor(targets)

    def hdc_state(self) -> HdcState:
        return load_hdc_state(self.run.path(TRAIN_HDC) / "checkpoints" / "final.ckpt", self.cfg.hdc)

    def probe(self, d1: DomainDataset) -> tuple[list[Sample], torch.Tensor]:
        """First ``eval.probe_size`` test samples of the first domain, by id."""
        samples = sorted(d1.test() or d1.train(), key=lambda s: s.id)[: self.cfg.eval.probe_size]
        if not samples:
            raise ValueError(f"Dataset '{d1.name}' has no samples to probe")
        return samples, images_to_tensor(samples)

    # -----------------------------------------------------------------------
    # Stages
    # -----------------------------------------------------------------------

    def synth(self) -> Path:
        if self.cfg.data.source != "synth":
            raise ValueError("The synth stage needs data.source = 'synth'")
        with self._stage(SYNTH) as out:
            result = gen_dataset(self.cfg.data, self.cfg.seed, out)
            display_dataset_counts({result.domain_a.name: result.domain_a, result.domain_b.name: result.domain_b})
        return out

    def train_bai(self, resume: bool = False) -> Path:
        d1, d2 = self.domains()
        resume_from = self._resume_point(TRAIN_BAI) if resume else None
        with self._stage(TRAIN_BAI, fresh=resume_from is None) as out:
            train_bai(
                self.cfg.bai,
                self.cfg.nets,
                d1,
                d2,
                out,
                self.cfg.seed,
                oracle=self.oracle_tensors(),
                resume_from=resume_from,
            )
        return out

    def build_matched(self) -> MatchedDomains:
        d1, d2 = self.domains()
        ckpt = load_checkpoint(self.run.path(TRAIN_BAI) / "checkpoints" / "final.ckpt")
        with self._stage(BUILD_MATCHED) as out:
            m = build_matched_domains(d1, d2, ckpt.bundle("g1"), ckpt.bundle("g2"))
            m.save(out)
            display_dataset_counts({"D_p1": m.d_p1, "D_p2": m.d_p2})
        return m

    def train_hdc(self, resume: bool = False) -> Path:
        d1, d2 = self.domains()
        m = MatchedDomains.load(self.run.path(BUILD_MATCHED))
        resume_from = self._resume_point(TRAIN_HDC) if resume else None
        with self._stage(TRAIN_HDC, fresh=resume_from is None) as out:
            train_hdc(
                self.cfg.hdc,
                self.cfg.nets,
                m,
                out,
                self.cfg.seed,
                domain1=d1.name,
                domain2=d2.name,
                resume_from=resume_from,
            )
        return out

    def evaluate(self) -> dict:
        """Score the first domain's test split (and the second's when it has one).

        Returns:
            The first domain's summary.
        """
        state = self.hdc_state()
        d1, d2 = self.domains()
        which = self.cfg.eval.which
        with self._stage(EVAL) as out:
            report = evaluate_dataset(state, d1, which=which)
            report.write(out)
            summary = report.summary()
            display_summary(f"Test set: {d1.name}", summary)
            if d2.test():
                second = evaluate_dataset(state, d2, which=which)
                second.write(out / d2.name)
                display_summary(f"Test set: {d2.name}", second.summary())
            else:
                logger.info("Second domain '%s' has no test samples; skipping its report", d2.name)
        return summary

    def analyze(self, kind: str) -> Path:
        if kind not in ANALYSES:
            raise ValueError(f"Unknown analysis '{kind}'; choose from {', '.join(ANALYSES)}")
        return getattr(self, f"_analyze_{kind}")()

    def _analyze_pca(self) -> Path:
        d1, d2 = self.domains()
        m = MatchedDomains.load(self.run.path(BUILD_MATCHED))
        groups = [
            (d1.name, list(d1.samples)),
            (d2.name, list(d2.samples)),
            (f"{d1.name}->{d2.name}", [s for s in m.d_p2.samples if s.id.endswith(f"@{TAG_1T2}")]),
            (f"{d2.name}->{d1.name}", [s for s in m.d_p1.samples if s.id.endswith(f"@{TAG_2T1}")]),
        ]
        images, ids, labels = [], [], []
        for label, samples in groups:
            for s in samples:
                images.append(normalize_image(s.image))
                ids.append(s.id)
                labels.append(label)
        with self._stage(f"{ANALYZE}/pca") as out:
            projection = pca_project(images, k=2, ids=ids, domains=labels)
            projection.write(out / "pca.csv")
            logger.info(
                "PCA of %d images; explained variance %s",
                len(images),
                ", ".join(f"{v:.4g}" for v in projection.explained_variance),
            )
        return out

    def _analyze_featcorr(self) -> Path:
        state = self.hdc_state()
        if state.s2 is None:
            raise ValueError("Feature correlation needs two networks; the run was trained with single_net")
        d1, _ = self.domains()
        _, probe = self.probe(d1)
        with self._stage(f"{ANALYZE}/featcorr") as out:
            layers = feature_correlation(state.s1, state.s2, probe, per_channel=self.cfg.eval.per_channel_correlation)
            write_featcorr(out / "featcorr.csv", layers)
            display_layer_values(
                "Feature correlation |r| (S1 vs S2)",
                [{"layer": c.layer, "abs_pearson": c.abs_pearson} for c in layers]
                + [{"layer": "mean", "abs_pearson": mean_correlation(layers)}],
                "abs_pearson",
            )
        return out

    def _analyze_divergence(self) -> Path:
        state = self.hdc_state()
        d1, _ = self.domains()
        samples, probe = self.probe(d1)
        with self._stage(f"{ANALYZE}/divergence") as out:
            maps = branch_divergence(state.s1, samples, probe)
            write_csv(
                out / "divergence.csv",
                ["id", "mean_abs_diff"],
                [{"id": d.id, "mean_abs_diff": d.mean_abs_diff} for d in maps],
            )
            maps_dir = out / "maps"
            maps_dir.mkdir()
            for d in maps:
                save_tensor(maps_dir / f"{sanitize_filename(d.id)}.ahd1", d.diff_map)
        return out

    def run_all(self, resume: bool = False) -> dict:
        """Every stage in order; returns the evaluation summary plus the mean feature correlation."""
        if self.cfg.data.source == "synth":
            self.synth()
        self.train_bai(resume=resume)
        self.build_matched()
        self.train_hdc(resume=resume)
        summary = self.evaluate()
        self.analyze("pca")
        featcorr_mean = None
        if not self.cfg.hdc.single_net:
            rows = read_csv(self.analyze("featcorr") / "featcorr.csv")
            featcorr_mean = float(next(r["abs_pearson"] for r in rows if r["layer"] == "mean"))
        if self.cfg.hdc.use_global_branch:
            self.analyze("divergence")
        return {**summary, "featcorr_mean": featcorr_mean}

    def _resume_point(self, stage: str) -> Path | None:
        ckpt_dir = self.run.path(stage) / "checkpoints"
        if not ckpt_dir.exists():
            return None
        if (ckpt_dir / "final.ckpt").exists():
            raise ValueError(f"Stage '{stage}' already finished in {self.run.path(stage)}; use --force to retrain")
        return latest_checkpoint(ckpt_dir)


# ---------------------------------------------------------------------------
# Parameter studies
# ---------------------------------------------------------------------------


def study_variants(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Cartesian product of the study axes, each with its own output directory."""
    root = Path(cfg.output_dir) / STUDY
    variants = []
    s = cfg.study
    for ratio, patch, lam, seed in itertools.product(s.label_ratios, s.patch_sizes, s.lambda_ows, s.seeds):
        name = f"ratio{ratio:g}_patch{patch}_ow{lam:g}_seed{seed}"
        variant = dataclasses.replace(
            cfg,
            seed=seed,
            output_dir=root / name,
            data=dataclasses.replace(cfg.data, label_ratio=ratio),
            nets=dataclasses.replace(cfg.nets, patch_size=patch),
            hdc=dataclasses.replace(cfg.hdc, lambda_ow=lam),
        )
        variants.append((name, validate_config(variant)))
    return variants


def run_study(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Run the full pipeline for every study variant and tabulate the results in ``study/study.csv``."""
    with Pipeline(cfg, force=force) as parent, parent._stage(STUDY) as out:
        rows = []
        for name, variant in study_variants(cfg):
            logger.info("Study variant %s", name)
            with Pipeline(variant, force=force) as pipeline:
                result = pipeline.run_all()
            rows.append(
                {
                    "variant": name,
                    "label_ratio": variant.data.label_ratio,
                    "patch_size": variant.nets.patch_size,
                    "lambda_ow": variant.hdc.lambda_ow,
                    "seed": variant.seed,
                    "dsc_mean": result["dsc"]["mean"],
                    "ji_mean": result["ji"]["mean"],
                    "asd_mean": result["asd"]["mean"],
                    "featcorr_mean": result["featcorr_mean"],
                }
            )
        path = write_csv(out / "study.csv", STUDY_COLUMNS, rows)
        display_study(rows)
    return path
