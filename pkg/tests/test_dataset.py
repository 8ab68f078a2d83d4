"""Tests for normalisation, splitting, batching and augmentation."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from ahdc_lab.dataset import (
    cycled,
    epoch_order,
    images_to_tensor,
    labelled_count,
    masks_to_tensor,
    normalize_image,
    random_angles,
    rotate_batch,
    split_dataset,
)
from ahdc_lab.models import Split, TensorImage


class TestNormalizeImage:
    def test_min_max(self):
        out = normalize_image(TensorImage(np.array([[0.0, 5.0, 10.0]])))
        assert np.allclose(out.plane, [[0.0, 0.5, 1.0]])

    def test_keeps_spacing(self):
        out = normalize_image(TensorImage(np.array([[1.0, 2.0]]), spacing=(2.0, 3.0)))
        assert out.spacing == (2.0, 3.0)

    def test_constant_image(self):
        with pytest.raises(ValueError, match="degenerate intensity range"):
            normalize_image(TensorImage(np.full((3, 3), 0.4)))


class TestLabelledCount:
    @pytest.mark.parametrize(
        ("n", "ratio", "expected"),
        [(99, 0.2, 20), (91, 0.2, 18), (10, 0.25, 3), (10, 0.05, 1), (4, 1.0, 4)],
    )
    def test_round_half_up(self, n, ratio, expected):
        assert labelled_count(n, ratio) == expected


class TestSplitDataset:
    def test_counts(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 99, 20, size=8)
        out = split_dataset(d, 0.2, seed=0)
        assert out.counts.n_labelled == 20
        assert out.counts.n_unlabelled == 79
        assert out.counts.n_test == 20

    def test_test_split_and_order_untouched(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 10, 3, size=8)
        out = split_dataset(d, 0.5, seed=1)
        assert [s.id for s in out] == [s.id for s in d]
        assert [s.id for s in out.test()] == [s.id for s in d.test()]

    def test_deterministic(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 20, size=8)
        a = split_dataset(d, 0.3, seed=7)
        b = split_dataset(d, 0.3, seed=7)
        assert [s.id for s in a.labelled()] == [s.id for s in b.labelled()]

    def test_seed_changes_selection(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 40, size=8)
        picks = {tuple(s.id for s in split_dataset(d, 0.25, seed=s).labelled()) for s in range(5)}
        assert len(picks) > 1

    def test_zero_labelled_rejected(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 5, size=8)
        with pytest.raises(ValueError, match="zero labelled"):
            split_dataset(d, 0.05, seed=0)

    @pytest.mark.parametrize("ratio", [0.0, 1.5, -0.1])
    def test_ratio_range(self, dataset_factory, ratio):
        d = dataset_factory("domain_a", 0, 5, size=8)
        with pytest.raises(ValueError, match="label_ratio"):
            split_dataset(d, ratio, seed=0)

    def test_not_enough_masks(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 4, size=8)
        unmasked = d.with_samples([s.replace(mask=None) for s in d.samples])
        with pytest.raises(ValueError, match="masked training samples"):
            split_dataset(unmasked, 0.5, seed=0)

    def test_full_ratio_labels_everything(self, dataset_factory):
        d = dataset_factory("domain_a", 0, 6, 2, size=8)
        out = split_dataset(d, 1.0, seed=0)
        assert out.counts.n_labelled == 6
        assert out.counts.n_unlabelled == 0


class TestBatching:
    def test_images_to_tensor(self, sample_factory):
        samples = [sample_factory(f"s{i}", seed=i) for i in range(3)]
        x = images_to_tensor(samples)
        assert x.shape == (3, 1, 16, 16)
        assert x.dtype == torch.float32
        assert float(x.min()) == 0.0
        assert float(x.max()) == 1.0

    def test_images_without_normalisation(self, sample_factory):
        s = sample_factory("s")
        x = images_to_tensor([s], normalize=False)
        assert np.allclose(x[0, 0].numpy(), s.image.plane)

    def test_masks_to_tensor(self, sample_factory):
        s = sample_factory("s")
        y = masks_to_tensor([s])
        assert y.shape == (1, 1, 16, 16)
        assert set(y.unique().tolist()) <= {0.0, 1.0}

    def test_masks_missing(self, sample_factory):
        with pytest.raises(ValueError, match="Samples without mask: s"):
            masks_to_tensor([sample_factory("s", with_mask=False, split=Split.TEST)])


class TestEpochOrder:
    def test_permutation(self):
        order = epoch_order(10, 0, "x")
        assert sorted(order) == list(range(10))

    def test_depends_only_on_seed_and_component(self):
        assert epoch_order(10, 3, "x") == epoch_order(10, 3, "x")
        assert epoch_order(10, 3, "x") != epoch_order(10, 3, "y")

    def test_empty(self):
        assert epoch_order(0, 0, "x") == []

    def test_cycled_wraps(self):
        assert cycled([3, 1, 2], 2, 4) == [2, 3, 1, 2]


class TestRotation:
    def test_zero_angle_is_identity(self):
        x = torch.rand(2, 1, 8, 8)
        out = rotate_batch(x, torch.zeros(2))
        assert torch.allclose(out, x, atol=1e-5)

    def test_nearest_keeps_masks_binary(self):
        y = (torch.rand(3, 1, 16, 16) > 0.5).float()
        out = rotate_batch(y, torch.tensor([10.0, -15.0, 7.0]), nearest=True)
        assert set(out.unique().tolist()) <= {0.0, 1.0}

    def test_quarter_turn_moves_pixel(self):
        x = torch.zeros(1, 1, 9, 9)
        x[0, 0, 4, 8] = 1.0
        out = rotate_batch(x, torch.tensor([90.0]), nearest=True)
        assert out.sum() >= 1.0
        assert out[0, 0, 4, 8] == 0.0

    def test_random_angles_in_range(self):
        gen = torch.Generator().manual_seed(0)
        angles = random_angles(100, 15.0, gen)
        assert angles.abs().max() <= 15.0

    def test_empty_batch(self):
        x = torch.zeros(0, 1, 8, 8)
        assert rotate_batch(x, torch.zeros(0)).shape == (0, 1, 8, 8)
