"""Procedural two-domain dataset: shared blob geometry rendered under two appearances.

The domain-B renderer doubles as the ground-truth mapping T* used to score
learned domain mappings on held-out oracle pairs.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from ahdc_lab.dataset import split_dataset
from ahdc_lab.env import ENV
from ahdc_lab.models import (
    AppearanceParams,
    DataConfig,
    DomainDataset,
    GeometryParams,
    LabelMask,
    Sample,
    Split,
    TensorImage,
)
from ahdc_lab.seeding import derive_seed, numpy_rng
from ahdc_lab.tensorio import save_manifest

logger = logging.getLogger("ahdc_lab")

MAX_GEOMETRY_RETRIES = 100
MIN_FG_FRACTION = 0.02
MAX_FG_FRACTION = 0.4

DOMAIN_A = "domain_a"
DOMAIN_B = "domain_b"
ORACLE = "oracle"


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def _lobe(
    yy: np.ndarray,
    xx: np.ndarray,
    centre: tuple[float, float],
    radius: float,
    wobble_amp: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Star-shaped region whose radius is perturbed by a few low harmonics."""
    dy, dx = yy - centre[0], xx - centre[1]
    dist = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    harmonics = np.arange(2, 5)
    amps = rng.uniform(-1.0, 1.0, size=harmonics.size) / harmonics.size
    phases = rng.uniform(0.0, 2.0 * math.pi, size=harmonics.size)
    wobble = sum(a * np.sin(k * theta + ph) for k, a, ph in zip(harmonics, amps, phases, strict=True))
    return dist <= radius * (1.0 + wobble_amp * wobble)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def gen_geometry(p: GeometryParams) -> LabelMask:
    """Draw a connected blob mask; deterministic given ``p.seed``.

    Raises:
        ValueError: If no draw satisfies the foreground-fraction bounds after
            ``MAX_GEOMETRY_RETRIES`` attempts.
    """
    rng = numpy_rng(p.seed, "geometry")
    size = p.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    for _ in range(MAX_GEOMETRY_RETRIES):
        r0 = rng.uniform(*p.radius_range) * size
        cy, cx = size / 2.0 + rng.uniform(-0.1, 0.1, size=2) * size
        lobes = [((cy, cx), r0)]
        for _ in range(p.n_lobes - 1):
            radius = rng.uniform(*p.radius_range) * size
            angle = rng.uniform(0.0, 2.0 * math.pi)
            offset = rng.uniform(0.3, 0.8) * r0
            lobes.append(((cy + offset * math.sin(angle), cx + offset * math.cos(angle)), radius))

        mask = np.zeros((size, size), dtype=bool)
        for centre, radius in lobes:
            mask |= _lobe(yy, xx, centre, radius, p.wobble_amp, rng)
        mask = _largest_component(mask)

        fraction = float(mask.mean())
        if MIN_FG_FRACTION <= fraction <= MAX_FG_FRACTION:
            return LabelMask(mask)

    raise ValueError(
        f"Geometry seed {p.seed}: no mask with foreground fraction in "
        f"[{MIN_FG_FRACTION}, {MAX_FG_FRACTION}] after {MAX_GEOMETRY_RETRIES} retries"
    )


# ---------------------------------------------------------------------------
# Appearance
# ---------------------------------------------------------------------------


def _tone(level: float, a: AppearanceParams) -> float:
    """Noise-free, stripe-free intensity a base level maps to."""
    if a.invert:
        level = 1.0 - level
    return level**a.gamma


def render(mask: LabelMask, a: AppearanceParams, seed: int) -> TensorImage:
    """Render *mask* under appearance *a*.

    ``image = clip(blur(noise(gamma(base))))`` where the base is the
    fg/bg composite, optionally inverted and striped.
    """
    m = mask.values.astype(np.float64)
    base = a.fg_mean * m + a.bg_mean * (1.0 - m)
    if a.invert:
        base = 1.0 - base
    if a.stripe_amp > 0:
        columns = np.arange(mask.width, dtype=np.float64)
        base = np.clip(base + a.stripe_amp * np.sin(2.0 * math.pi * columns / a.stripe_period)[np.newaxis, :], 0, 1)

    image = base**a.gamma
    if a.noise_sigma > 0:
        image = image + numpy_rng(seed, "render").normal(0.0, a.noise_sigma, size=image.shape)
    if a.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=a.blur_sigma, mode="nearest")
    return TensorImage(np.clip(image, 0.0, 1.0), spacing=mask.spacing)


def threshold_segment(image: TensorImage, a: AppearanceParams) -> LabelMask:
    """Segment an image rendered with *a* at the midpoint of its fg/bg tones.

    Stripes are not compensated; use on stripe-free appearances.
    """
    fg, bg = _tone(a.fg_mean, a), _tone(a.bg_mean, a)
    threshold = 0.5 * (fg + bg)
    plane = image.plane
    return LabelMask(plane >= threshold if fg > bg else plane <= threshold, spacing=image.spacing)


def oracle_transform(
    x_a: TensorImage,
    mask: LabelMask,
    params_a: AppearanceParams,
    params_b: AppearanceParams,
    seed: int,
) -> TensorImage:
    """Ground-truth matched sample T*(x_a): the same geometry rendered in domain B."""
    if (x_a.height, x_a.width) != (mask.height, mask.width):
        raise ValueError(f"Image shape {(x_a.height, x_a.width)} does not match mask {(mask.height, mask.width)}")
    if not np.array_equal(render(mask, params_a, seed).values, x_a.values):
        logger.warning("oracle_transform: x_a is not the domain-A rendering of the given mask and seed")
    return render(mask, params_b, seed)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass
class SynthOutput:
    """Paths and in-memory datasets written by :func:`gen_dataset`."""

    domain_a: DomainDataset
    domain_b: DomainDataset
    oracle: DomainDataset
    pairing: list[dict]
    manifest_a: Path
    manifest_b: Path
    oracle_manifest: Path
    pairing_path: Path


@dataclass(frozen=True)
class _Item:
    sample_id: str
    geom_seed: int
    domain: str
    split: Split


def _geometry_for(cfg: DataConfig, geom_seed: int) -> LabelMask:
    n_lobes = int(numpy_rng(geom_seed, "lobes").integers(1, cfg.max_lobes + 1))
    params = GeometryParams(
        image_size=cfg.image_size,
        n_lobes=n_lobes,
        radius_range=tuple(cfg.radius_range),
        wobble_amp=cfg.wobble_amp,
        seed=geom_seed,
    )
    return gen_geometry(params)


def _make_sample(cfg: DataConfig, item: _Item) -> Sample:
    mask = _geometry_for(cfg, item.geom_seed)
    appearance = cfg.appearance_a if item.domain == DOMAIN_A else cfg.appearance_b
    image = render(mask, appearance, item.geom_seed)
    return Sample(id=item.sample_id, image=image, mask=mask, domain=item.domain, split=item.split)


def _make_pair(cfg: DataConfig, index: int, geom_seed: int) -> tuple[Sample, Sample]:
    mask = _geometry_for(cfg, geom_seed)
    x_a = render(mask, cfg.appearance_a, geom_seed)
    x_b = oracle_transform(x_a, mask, cfg.appearance_a, cfg.appearance_b, geom_seed)
    return (
        Sample(id=f"pair_{index:04d}_a", image=x_a, mask=mask, domain=DOMAIN_A, split=Split.TEST),
        Sample(id=f"pair_{index:04d}_b", image=x_b, mask=mask, domain=DOMAIN_B, split=Split.TEST),
    )


def _items(seed: int, prefix: str, domain: str, split: Split, count: int) -> list[_Item]:
    tag = "train" if split.is_train else "test"
    return [
        _Item(f"{prefix}_{i:04d}", derive_seed(seed, f"geometry:{domain}:{tag}:{i}"), domain, split)
        for i in range(count)
    ]


def gen_dataset(cfg: DataConfig, seed: int, out_dir: str | Path) -> SynthOutput:
    """Generate both domain datasets and the oracle pair set under *out_dir*.

    Training geometries of the two domains use disjoint seeds, so the domains
    are unpaired; oracle pairs share a geometry across both renderings and
    are written to their own manifest, never to the training manifests.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    items_a = _items(seed, "a", DOMAIN_A, Split.TRAIN_UNLABELLED, cfg.n_a) + _items(
        seed, "a_test", DOMAIN_A, Split.TEST, cfg.n_test_a
    )
    items_b = _items(seed, "b", DOMAIN_B, Split.TRAIN_UNLABELLED, cfg.n_b) + _items(
        seed, "b_test", DOMAIN_B, Split.TEST, cfg.n_test_b
    )
    pair_seeds = [derive_seed(seed, f"geometry:pair:{i}") for i in range(cfg.n_pairs)]

    all_seeds = [it.geom_seed for it in items_a + items_b] + pair_seeds
    if len(set(all_seeds)) != len(all_seeds):
        raise ValueError(f"Geometry seed collision for experiment seed {seed}")

    logger.info(
        "Generating %d domain-A, %d domain-B samples and %d oracle pairs (%d workers)",
        len(items_a),
        len(items_b),
        cfg.n_pairs,
        ENV.threads,
    )
    with ThreadPoolExecutor(max_workers=ENV.threads) as pool:
        samples_a = list(pool.map(lambda it: _make_sample(cfg, it), items_a))
        samples_b = list(pool.map(lambda it: _make_sample(cfg, it), items_b))
        pairs = list(pool.map(lambda args: _make_pair(cfg, *args), enumerate(pair_seeds)))

    domain_a = split_dataset(DomainDataset(DOMAIN_A, tuple(samples_a)), cfg.label_ratio, seed)
    domain_b = DomainDataset(DOMAIN_B, tuple(samples_b))
    if cfg.label_ratio_b > 0:
        domain_b = split_dataset(domain_b, cfg.label_ratio_b, seed)
    oracle = DomainDataset(ORACLE, tuple(s for pair in pairs for s in pair))
    pairing = [
        {"geom_seed": geom_seed, "a": a.id, "b": b.id} for geom_seed, (a, b) in zip(pair_seeds, pairs, strict=True)
    ]

    manifest_a = save_manifest(domain_a, out_dir / f"{DOMAIN_A}.json")
    manifest_b = save_manifest(domain_b, out_dir / f"{DOMAIN_B}.json")
    oracle_manifest = save_manifest(oracle, out_dir / f"{ORACLE}.json")
    pairing_path = out_dir / "pairing.json"
    pairing_path.write_text(json.dumps(pairing, indent=2) + "\n")

    if not pairing:
        logger.info("No oracle pairs requested; BAI oracle evaluation disabled")
    return SynthOutput(
        domain_a=domain_a,
        domain_b=domain_b,
        oracle=oracle,
        pairing=pairing,
        manifest_a=manifest_a,
        manifest_b=manifest_b,
        oracle_manifest=oracle_manifest,
        pairing_path=pairing_path,
    )


def load_pairing(path: str | Path) -> list[dict]:
    """Read a pairing table written by :func:`gen_dataset`."""
    path = Path(path)
    if not path.exists():
        return []
    return json.loads(path.read_text())
