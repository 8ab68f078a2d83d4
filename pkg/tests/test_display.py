"""Tests for display utilities."""

from __future__ import annotations

from unittest import mock

import pytest
from rich.console import Console

from ahdc_lab.display import (
    display_dataset_counts,
    display_layer_values,
    display_stage_banner,
    display_study,
    display_summary,
    training_progress,
)


@pytest.fixture
def recorded():
    """Swap the module console for one that records its output."""
    console = Console(record=True, width=120, force_terminal=False)
    with mock.patch("ahdc_lab.display.console", console):
        yield console


class TestDisplay:
    def test_stage_banner(self, recorded):
        display_stage_banner("train-bai", "abc123def456", "/tmp/run/train-bai")
        text = recorded.export_text()
        assert "Stage: train-bai" in text
        assert "abc123def456" in text

    def test_dataset_counts(self, recorded, dataset_factory):
        display_dataset_counts({"domain_a": dataset_factory("domain_a", 2, 3, 1)})
        text = recorded.export_text()
        assert "domain_a" in text
        assert "Unlabelled" in text

    def test_summary(self, recorded):
        summary = {
            "n": 3,
            "dsc": {"mean": 0.8125, "std": 0.1},
            "ji": {"mean": None, "std": None},
            "asd": {"mean": 1.5, "std": 0.0},
            "excluded": ["a_0001"],
        }
        display_summary("Test set: domain_a", summary)
        text = recorded.export_text()
        assert "n=3, excluded=1" in text
        assert "0.8125" in text
        assert "N/A" in text

    def test_layer_values(self, recorded):
        display_layer_values("Correlation", [{"layer": "inc", "abs_pearson": 0.25}], "abs_pearson")
        assert "0.2500" in recorded.export_text()

    def test_no_layers(self, recorded):
        display_layer_values("Correlation", [], "abs_pearson")
        assert "No layers." in recorded.export_text()

    def test_study(self, recorded):
        rows = [
            {
                "variant": "ratio0.1_patch8_ow0_seed0",
                "label_ratio": 0.1,
                "patch_size": 8,
                "lambda_ow": 0.0,
                "seed": 0,
                "dsc_mean": None,
                "featcorr_mean": 0.5,
            }
        ]
        display_study(rows)
        text = recorded.export_text()
        assert "ratio0.1_patch8_ow0_seed0" in text
        assert "N/A" in text

    def test_training_progress_is_transient(self):
        progress = training_progress()
        with progress:
            task = progress.add_task("epoch", total=2)
            progress.advance(task)
        assert progress.live.transient
