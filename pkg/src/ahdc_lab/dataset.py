"""Dataset operations: normalisation, labelled/unlabelled splitting, batching and augmentation."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ahdc_lab.models import DomainDataset, Sample, Split, TensorImage
from ahdc_lab.seeding import numpy_rng, torch_generator

logger = logging.getLogger("ahdc_lab")


def normalize_image(t: TensorImage) -> TensorImage:
    """Min-max normalise an image to [0, 1].

    Raises:
        ValueError: If the image is constant.
    """
    values = t.values.astype(np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise ValueError("degenerate intensity range")
    return TensorImage((values - lo) / (hi - lo), spacing=t.spacing)


def labelled_count(n_train: int, label_ratio: float) -> int:
    """Round-half-up of ``label_ratio * n_train``."""
    return math.floor(label_ratio * n_train + 0.5)


def split_dataset(d: DomainDataset, label_ratio: float, seed: int) -> DomainDataset:
    """Re-partition the training samples of *d* into labelled and unlabelled.

    Candidates for the labelled pool are the training samples that carry a
    mask, ordered by id before the seeded shuffle. Test samples and the
    original sample order are left untouched.

    Raises:
        ValueError: If the ratio is out of range, yields zero labelled samples,
            or asks for more labelled samples than there are masks.
    """
    if not 0.0 < label_ratio <= 1.0:
        raise ValueError(f"label_ratio must be in (0, 1], got {label_ratio}")
    train = d.train()
    n_labelled = labelled_count(len(train), label_ratio)
    if n_labelled == 0:
        raise ValueError(f"label_ratio {label_ratio} yields zero labelled samples out of {len(train)}")

    pool = sorted((s for s in train if s.mask is not None), key=lambda s: s.id)
    if len(pool) < n_labelled:
        raise ValueError(f"Dataset '{d.name}' has {len(pool)} masked training samples, {n_labelled} requested")

    order = numpy_rng(seed, f"split:{d.name}").permutation(len(pool))
    chosen = {pool[i].id for i in order[:n_labelled]}

    samples = []
    for sample in d.samples:
        if not sample.split.is_train:
            samples.append(sample)
            continue
        split = Split.TRAIN_LABELLED if sample.id in chosen else Split.TRAIN_UNLABELLED
        samples.append(sample if sample.split is split else sample.replace(split=split))
    logger.debug("Split '%s': %d labelled / %d training samples", d.name, n_labelled, len(train))
    return d.with_samples(samples)


# ---------------------------------------------------------------------------
# Tensor batching
# ---------------------------------------------------------------------------


def images_to_tensor(samples: Sequence[Sample], normalize: bool = True) -> torch.Tensor:
    """Stack the first channel of each sample image into an ``(N, 1, H, W)`` float32 tensor."""
    if not samples:
        return torch.empty(0, 1, 0, 0)
    planes = [(normalize_image(s.image) if normalize else s.image).plane for s in samples]
    return torch.from_numpy(np.stack(planes)[:, np.newaxis].astype(np.float32))


def masks_to_tensor(samples: Sequence[Sample]) -> torch.Tensor:
    """Stack sample masks into an ``(N, 1, H, W)`` float32 tensor of zeros and ones."""
    missing = [s.id for s in samples if s.mask is None]
    if missing:
        raise ValueError(f"Samples without mask: {', '.join(missing)}")
    return torch.from_numpy(np.stack([s.mask.values for s in samples])[:, np.newaxis].astype(np.float32))


def epoch_order(n: int, seed: int, component: str) -> list[int]:
    """A seeded permutation of ``range(n)``; the stream depends only on (seed, component)."""
    if n == 0:
        return []
    return torch.randperm(n, generator=torch_generator(seed, component)).tolist()


def cycled(order: list[int], start: int, count: int) -> list[int]:
    """Take *count* entries of *order* starting at *start*, wrapping around."""
    return [order[(start + i) % len(order)] for i in range(count)]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def random_angles(n: int, max_degrees: float, generator: torch.Generator) -> torch.Tensor:
    """Uniform angles in ``[-max_degrees, max_degrees]``."""
    return (torch.rand(n, generator=generator, dtype=torch.float64) * 2.0 - 1.0) * max_degrees


def rotate_batch(tensor: torch.Tensor, angles_deg: torch.Tensor, nearest: bool = False) -> torch.Tensor:
    """Rotate each ``(N, C, H, W)`` item about the image centre.

    Bilinear sampling for images, nearest for masks so labels stay binary.
    Border pixels are replicated into the corners uncovered by the rotation.
    """
    if tensor.shape[0] == 0:
        return tensor
    radians = angles_deg.to(torch.float64) * (math.pi / 180.0)
    cos, sin = torch.cos(radians), torch.sin(radians)
    zeros = torch.zeros_like(cos)
    theta = torch.stack([torch.stack([cos, -sin, zeros], dim=-1), torch.stack([sin, cos, zeros], dim=-1)], dim=1)
    grid = F.affine_grid(theta.to(tensor.dtype), list(tensor.shape), align_corners=False)
    return F.grid_sample(
        tensor,
        grid,
        mode="nearest" if nearest else "bilinear",
        padding_mode="border",
        align_corners=False,
    )
