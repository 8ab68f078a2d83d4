"""Tests for checkpoint archives."""

from __future__ import annotations

import json
import zipfile

import pytest
import torch

from ahdc_lab.checkpoint import latest_checkpoint, load_checkpoint, load_parameters, save_checkpoint
from ahdc_lab.errors import MissingArtifactError
from ahdc_lab.nets import build_dual_net, build_mapping_net, forward_mapping


@pytest.fixture
def trained_pair(tiny_mapping):
    """A mapping net with an Adam state after one update."""
    g = build_mapping_net(tiny_mapping, seed=0, component="g1")
    opt = torch.optim.Adam(g.module.parameters(), lr=1e-3)
    loss = forward_mapping(g, torch.rand(2, 1, 8, 8)).mean()
    loss.backward()
    opt.step()
    return g, opt


class TestSaveCheckpoint:
    def test_archive_layout(self, tmp_path, trained_pair):
        g, opt = trained_pair
        path = save_checkpoint(
            tmp_path / "c.ckpt", stage="bai", step=3, epoch=1, bundles={"g1": g}, optimizers={"g": opt}
        )
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            meta = json.loads(zf.read("meta.json"))
        assert names == sorted(names)
        assert "meta.json" in names
        assert any(n.startswith("params/g1/") and n.endswith(".ahd1") for n in names)
        assert any(n.startswith("optim/g/") for n in names)
        assert meta["stage"] == "bai"
        assert meta["step"] == 3
        assert meta["bundles"]["g1"]["descriptor"]["kind"] == "mapping"

    def test_byte_identical(self, tmp_path, trained_pair):
        g, opt = trained_pair
        a = save_checkpoint(tmp_path / "a.ckpt", stage="bai", step=1, epoch=0, bundles={"g1": g}, optimizers={"g": opt})
        b = save_checkpoint(tmp_path / "b.ckpt", stage="bai", step=1, epoch=0, bundles={"g1": g}, optimizers={"g": opt})
        assert a.read_bytes() == b.read_bytes()

    def test_no_temporary_left(self, tmp_path, trained_pair):
        g, _ = trained_pair
        save_checkpoint(tmp_path / "ck" / "c.ckpt", stage="bai", step=0, epoch=0, bundles={"g1": g})
        assert [p.name for p in (tmp_path / "ck").iterdir()] == ["c.ckpt"]


class TestLoadCheckpoint:
    def test_parameters_restored(self, tmp_path, trained_pair):
        g, opt = trained_pair
        path = save_checkpoint(
            tmp_path / "c.ckpt",
            stage="bai",
            step=1,
            epoch=0,
            bundles={"g1": g},
            optimizers={"g": opt},
            scalars={"s_d": 0.25},
            history=[{"step": 1, "loss": 0.5}],
            info={"note": "x"},
        )
        ckpt = load_checkpoint(path)
        restored = ckpt.bundle("g1")
        for (n1, p1), (n2, p2) in zip(g.module.named_parameters(), restored.module.named_parameters(), strict=True):
            assert n1 == n2
            assert torch.equal(p1, p2)
        assert ckpt.scalars == {"s_d": 0.25}
        assert ckpt.history == [{"step": 1, "loss": 0.5}]
        assert ckpt.info == {"note": "x"}

    def test_optimizer_state_restored(self, tmp_path, trained_pair):
        g, opt = trained_pair
        path = save_checkpoint(
            tmp_path / "c.ckpt", stage="bai", step=1, epoch=0, bundles={"g1": g}, optimizers={"g": opt}
        )
        restored = load_checkpoint(path).bundle("g1")
        opt2 = torch.optim.Adam(restored.module.parameters(), lr=1.0)
        opt2.load_state_dict(load_checkpoint(path).optimizers["g"])
        assert opt2.param_groups[0]["lr"] == pytest.approx(1e-3)
        s1 = opt.state_dict()["state"][0]
        s2 = opt2.state_dict()["state"][0]
        assert torch.equal(s1["exp_avg"], s2["exp_avg"])
        assert float(s1["step"]) == float(s2["step"])

    def test_dual_net(self, tmp_path, tiny_dual):
        s = build_dual_net(tiny_dual, seed=0, component="s1")
        path = save_checkpoint(tmp_path / "c.ckpt", stage="hdc", step=0, epoch=0, bundles={"s1": s})
        assert load_checkpoint(path).descriptors["s1"] == tiny_dual

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="missing checkpoint"):
            load_checkpoint(tmp_path / "none.ckpt")

    def test_missing_bundle(self, tmp_path, trained_pair):
        g, _ = trained_pair
        path = save_checkpoint(tmp_path / "c.ckpt", stage="bai", step=0, epoch=0, bundles={"g1": g})
        with pytest.raises(KeyError, match="no bundle 'g2'"):
            load_checkpoint(path).bundle("g2")


class TestLoadParameters:
    def test_shape_mismatch(self, tiny_mapping):
        g = build_mapping_net(tiny_mapping, seed=0, component="g")
        params = {n: torch.zeros(1) for n, _ in g.module.named_parameters()}
        with pytest.raises(ValueError, match="Shape mismatch"):
            load_parameters(g, params)

    def test_missing_parameter(self, tiny_mapping):
        g = build_mapping_net(tiny_mapping, seed=0, component="g")
        with pytest.raises(ValueError, match="missing"):
            load_parameters(g, {})


class TestLatestCheckpoint:
    def test_prefers_final(self, tmp_path):
        for name in ("epoch_0000.ckpt", "epoch_0002.ckpt", "final.ckpt"):
            (tmp_path / name).touch()
        assert latest_checkpoint(tmp_path).name == "final.ckpt"

    def test_highest_epoch(self, tmp_path):
        for name in ("epoch_0000.ckpt", "epoch_0010.ckpt", "epoch_0002.ckpt"):
            (tmp_path / name).touch()
        assert latest_checkpoint(tmp_path).name == "epoch_0010.ckpt"

    def test_empty(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            latest_checkpoint(tmp_path)
