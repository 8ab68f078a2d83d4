"""Seed derivation: one experiment seed, one independent stream per consumer."""

from __future__ import annotations

import hashlib

import numpy as np
import torch

_SEED_MASK = (1 << 63) - 1


def derive_seed(seed: int, component: str) -> int:
    """Derive a 63-bit seed for *component* from the experiment seed.

    The derivation hashes ``"<seed>:<component>"`` with SHA-256, so streams for
    different components never depend on how many numbers another component
    has drawn.
    """
    digest = hashlib.sha256(f"{int(seed)}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & _SEED_MASK


def numpy_rng(seed: int, component: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, component))


def torch_generator(seed: int, component: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, component))
    return gen
