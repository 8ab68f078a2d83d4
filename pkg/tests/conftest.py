"""Shared test fixtures."""

from __future__ import annotations

import textwrap

import numpy as np
import pytest
import torch

from ahdc_lab.models import (
    DataConfig,
    DomainDataset,
    HdcConfig,
    LabelMask,
    NetsConfig,
    Sample,
    Split,
    TensorImage,
)
from ahdc_lab.nets import DualNetDescriptor, MappingNetDescriptor


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="Run end-to-end training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="Need --run-slow to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _single_thread_torch():
    torch.set_num_threads(1)


def disk_mask(size: int, cy: float, cx: float, r: float) -> LabelMask:
    yy, xx = np.mgrid[0:size, 0:size]
    return LabelMask(((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8))


def make_sample(
    sample_id: str,
    domain: str = "domain_a",
    split: Split = Split.TRAIN_UNLABELLED,
    size: int = 16,
    seed: int = 0,
    with_mask: bool = True,
) -> Sample:
    """A bright disk on a noisy dark background."""
    rng = np.random.default_rng(seed)
    mask = disk_mask(size, size / 2 + rng.uniform(-2, 2), size / 2 + rng.uniform(-2, 2), size / 4)
    image = 0.2 + 0.6 * mask.values + rng.normal(0, 0.03, (size, size))
    return Sample(
        id=sample_id,
        image=TensorImage(image),
        mask=mask if with_mask else None,
        domain=domain,
        split=split,
    )


def make_dataset(
    name: str,
    n_labelled: int,
    n_unlabelled: int,
    n_test: int = 0,
    size: int = 16,
    seed: int = 0,
    invert: bool = False,
) -> DomainDataset:
    prefix = name[-1]
    samples = []
    plan = [(Split.TRAIN_LABELLED, n_labelled), (Split.TRAIN_UNLABELLED, n_unlabelled), (Split.TEST, n_test)]
    i = 0
    for split, count in plan:
        for _ in range(count):
            s = make_sample(f"{prefix}_{i:04d}", domain=name, split=split, size=size, seed=seed * 1000 + i)
            if invert:
                s = s.replace(image=TensorImage(1.0 - s.image.values))
            samples.append(s)
            i += 1
    return DomainDataset(name, tuple(samples))


@pytest.fixture
def sample_factory():
    return make_sample


@pytest.fixture
def dataset_factory():
    return make_dataset


@pytest.fixture
def tiny_mapping() -> MappingNetDescriptor:
    return MappingNetDescriptor(levels=2, base_channels=4, max_channels=8)


@pytest.fixture
def tiny_dual() -> DualNetDescriptor:
    return DualNetDescriptor(
        feature=MappingNetDescriptor(
            levels=2, base_channels=4, max_channels=8, out_channels=2, output_activation="none"
        ),
        patch_size=4,
        attention_blocks=1,
        heads=2,
    )


@pytest.fixture
def tiny_nets() -> NetsConfig:
    return NetsConfig(
        levels=2,
        base_channels=4,
        max_channels=8,
        feature_levels=2,
        feature_base_channels=4,
        feature_channels=2,
        patch_size=4,
        attention_blocks=1,
        heads=2,
    )


@pytest.fixture
def tiny_hdc() -> HdcConfig:
    return HdcConfig(epochs=1, batch_size=2, labelled_batch_size=2, rotation_degrees=0.0)


@pytest.fixture
def tiny_data() -> DataConfig:
    return DataConfig(image_size=32, n_a=6, n_b=5, n_test_a=2, n_test_b=2, n_pairs=2, label_ratio=0.5)


SMOKE_YAML = """\
seed: 0
output_dir: ./run

logging:
  level: WARNING

data:
  source: synth
  image_size: 32
  n_a: 8
  n_b: 8
  n_test_a: 2
  n_test_b: 2
  n_pairs: 2
  label_ratio: 0.25

nets:
  levels: 2
  base_channels: 4
  max_channels: 8
  feature_levels: 2
  feature_base_channels: 4
  feature_channels: 2
  patch_size: 4
  attention_blocks: 1
  heads: 2

bai:
  epochs: 1
  batch_size: 4

hdc:
  epochs: 1
  batch_size: 4
  labelled_batch_size: 2

eval:
  probe_size: 2

study:
  label_ratios: [0.25]
  patch_sizes: [4]
  lambda_ows: [0.0, 0.1]
  seeds: [0]
"""


@pytest.fixture
def smoke_yaml(tmp_path):
    """A small experiment config file; outputs go to ``tmp_path/run``."""
    config_file = tmp_path / "smoke.yaml"
    config_file.write_text(SMOKE_YAML)
    return config_file


@pytest.fixture
def env_var_yaml(tmp_path):
    """A config file that uses env var interpolation."""
    config_file = tmp_path / "env.yaml"
    config_file.write_text(
        textwrap.dedent("""\
        output_dir: "${TEST_RUN_DIR}/out"
        logging:
          level: "${TEST_LOG_LEVEL}"
    """)
    )
    return config_file
