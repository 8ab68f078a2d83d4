"""Data models for ahdc-lab."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DATA_SOURCES = ("synth", "manifests")
PATCH_SIZES = (4, 8, 16)
BRANCH_STRUCTURES = ("local-global", "local-local", "global-global")
OW_PAIRINGS = ("all-pairs", "diagonal")
RAMP_UNITS = ("iteration", "epoch")
WHICH_CHOICES = ("auto", "s1", "s2")


class Split(enum.Enum):
    """Partition a sample belongs to."""

    TRAIN_LABELLED = "train-labelled"
    TRAIN_UNLABELLED = "train-unlabelled"
    TEST = "test"

    @property
    def is_train(self) -> bool:
        return self is not Split.TEST


def _check_spacing(spacing: tuple[float, float]) -> tuple[float, float]:
    dy, dx = (float(s) for s in spacing)
    if dy <= 0 or dx <= 0:
        raise ValueError(f"Spacing must be positive, got ({dy}, {dx})")
    return dy, dx


@dataclass(frozen=True, eq=False)
class TensorImage:
    """A 2D real-valued raster stored channel-last as float32.

    Accepts an ``(H, W)`` or ``(H, W, C)`` array; the stored buffer is a
    read-only copy.
    """

    values: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[..., np.newaxis]
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"TensorImage needs a non-empty (H, W, C) array, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("TensorImage values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def plane(self) -> np.ndarray:
        """First channel as an ``(H, W)`` view."""
        return self.values[..., 0]


@dataclass(frozen=True, eq=False)
class LabelMask:
    """A 2D binary raster; values are exactly 0 or 1, stored as uint8."""

    values: np.ndarray
    spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        raw = np.asarray(self.values)
        if raw.ndim == 3 and raw.shape[2] == 1:
            raw = raw[..., 0]
        if raw.ndim != 2 or min(raw.shape) < 1:
            raise ValueError(f"LabelMask needs a non-empty (H, W) array, got shape {raw.shape}")
        if not np.isin(raw, (0, 1)).all():
            raise ValueError("LabelMask values must be 0 or 1")
        values = raw.astype(np.uint8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def area(self) -> int:
        return int(self.values.sum())

    def as_bool(self) -> np.ndarray:
        return self.values.astype(bool)


@dataclass(frozen=True, eq=False)
class Sample:
    """One image of a domain, with its mask when one is known."""

    id: str
    image: TensorImage
    mask: LabelMask | None
    domain: str
    split: Split

    def __post_init__(self) -> None:
        if self.split is Split.TRAIN_LABELLED and self.mask is None:
            raise ValueError(f"Sample '{self.id}': labelled sample missing mask")
        if self.mask is not None and (self.mask.height, self.mask.width) != (self.image.height, self.image.width):
            raise ValueError(
                f"Sample '{self.id}': mask shape {self.mask.values.shape} does not match image "
                f"{(self.image.height, self.image.width)}"
            )

    def replace(self, **changes: object) -> Sample:
        data = {
            "id": self.id,
            "image": self.image,
            "mask": self.mask,
            "domain": self.domain,
            "split": self.split,
        }
        data.update(changes)
        return Sample(**data)  # type: ignore[arg-type]


@dataclass(frozen=True)
class DatasetCounts:
    n_labelled: int
    n_unlabelled: int
    n_test: int


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """A named, ordered collection of samples from one domain."""

    name: str
    samples: tuple[Sample, ...] = ()

    def __post_init__(self) -> None:
        samples = tuple(self.samples)
        duplicates = sorted(i for i, n in Counter(s.id for s in samples).items() if n > 1)
        if duplicates:
            raise ValueError(f"Dataset '{self.name}' has duplicate sample ids: {', '.join(duplicates)}")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def counts(self) -> DatasetCounts:
        return DatasetCounts(
            n_labelled=len(self.labelled()),
            n_unlabelled=len(self.unlabelled()),
            n_test=len(self.test()),
        )

    def labelled(self) -> list[Sample]:
        return [s for s in self.samples if s.split is Split.TRAIN_LABELLED]

    def unlabelled(self) -> list[Sample]:
        return [s for s in self.samples if s.split is Split.TRAIN_UNLABELLED]

    def test(self) -> list[Sample]:
        return [s for s in self.samples if s.split is Split.TEST]

    def train(self) -> list[Sample]:
        return [s for s in self.samples if s.split.is_train]

    def get(self, sample_id: str) -> Sample:
        for sample in self.samples:
            if sample.id == sample_id:
                return sample
        raise KeyError(f"Sample '{sample_id}' not in dataset '{self.name}'")

    def with_samples(self, samples: list[Sample] | tuple[Sample, ...], name: str | None = None) -> DomainDataset:
        return DomainDataset(name=name or self.name, samples=tuple(samples))


# ---------------------------------------------------------------------------
# Synthetic data parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryParams:
    """Shape parameters of one synthetic blob geometry."""

    image_size: int = 64
    n_lobes: int = 1
    radius_range: tuple[float, float] = (0.15, 0.25)
    wobble_amp: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if not 1 <= self.n_lobes <= 3:
            raise ValueError(f"n_lobes must be in 1..3, got {self.n_lobes}")
        low, high = self.radius_range
        if not 0 < low <= high < 0.5:
            raise ValueError(f"radius_range must lie within (0, 0.5) with min <= max, got {self.radius_range}")
        if self.wobble_amp < 0:
            raise ValueError(f"wobble_amp must be >= 0, got {self.wobble_amp}")


@dataclass(frozen=True)
class AppearanceParams:
    """Rendering parameters of one appearance domain."""

    fg_mean: float = 0.8
    bg_mean: float = 0.2
    noise_sigma: float = 0.03
    blur_sigma: float = 0.5
    gamma: float = 1.0
    stripe_amp: float = 0.0
    stripe_period: int = 6
    invert: bool = False

    def __post_init__(self) -> None:
        for name in ("fg_mean", "bg_mean"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.fg_mean == self.bg_mean:
            raise ValueError("fg_mean and bg_mean must differ")
        if self.noise_sigma < 0 or self.blur_sigma < 0 or self.stripe_amp < 0:
            raise ValueError("noise_sigma, blur_sigma and stripe_amp must be >= 0")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.stripe_period < 2:
            raise ValueError(f"stripe_period must be >= 2, got {self.stripe_period}")


def domain_a_appearance() -> AppearanceParams:
    """Domain A: bright blob on a dark background, mild noise."""
    return AppearanceParams(fg_mean=0.8, bg_mean=0.2, noise_sigma=0.03, blur_sigma=0.5, gamma=1.0)


def domain_b_appearance() -> AppearanceParams:
    """Domain B: inverted, gamma-compressed, striped and more strongly blurred."""
    return AppearanceParams(
        fg_mean=0.8,
        bg_mean=0.2,
        noise_sigma=0.05,
        blur_sigma=1.0,
        gamma=1.8,
        stripe_amp=0.1,
        stripe_period=6,
        invert=True,
    )


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class LoggingConfig:
    """Logging configuration."""

    level: str = "INFO"
    file: str | None = None


@dataclass
class DataConfig:
    """Where the two domains come from: synthesised or read from manifests."""

    source: str = "synth"
    manifest_a: Path | None = None
    manifest_b: Path | None = None
    oracle_manifest: Path | None = None
    image_size: int = 64
    n_a: int = 99
    n_b: int = 91
    n_test_a: int = 20
    n_test_b: int = 20
    n_pairs: int = 20
    label_ratio: float = 0.2
    label_ratio_b: float = 0.0
    max_lobes: int = 3
    radius_range: tuple[float, float] = (0.15, 0.25)
    wobble_amp: float = 0.15
    appearance_a: AppearanceParams = field(default_factory=domain_a_appearance)
    appearance_b: AppearanceParams = field(default_factory=domain_b_appearance)


@dataclass
class NetsConfig:
    """Architecture sizes for the mapping, discriminator and dual-modelling networks."""

    levels: int = 4
    base_channels: int = 16
    max_channels: int = 128
    use_skip_connections: bool = True
    feature_levels: int = 4
    feature_base_channels: int = 16
    feature_channels: int = 16
    patch_size: int = 8
    attention_blocks: int = 2
    heads: int = 4
    positional_encoding: bool = True
    branch_structure: str = "local-global"


@dataclass
class BaiConfig:
    """Adversarial domain-mapping stage."""

    epochs: int = 10
    batch_size: int = 8
    lr_g: float = 1e-3
    lr_t: float = 1e-4
    lr_decay: float = 0.98
    decay_every_steps: int | None = None  # None = decay once per epoch
    d_steps: int = 1
    g_steps: int = 1
    checkpoint_every: int = 5
    use_reconstruction: bool = True


@dataclass
class HdcConfig:
    """Dual-consistency segmentation stage."""

    epochs: int = 10
    batch_size: int = 4
    labelled_batch_size: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.98
    lambda_super: float = 0.5
    lambda_inter: float = 1.0
    lambda_ow: float = 0.1
    t_max: int | None = None  # None = total number of iterations
    ramp_unit: str = "iteration"
    rotation_degrees: float = 15.0
    use_global_branch: bool = True
    single_net: bool = False
    combined_objective: bool = False
    consistency_unlabelled_only: bool = False
    symmetric_inter: bool = True
    ow_pairing: str = "all-pairs"
    supervised_only: bool = False
    checkpoint_every: int = 5


@dataclass
class EvalConfig:
    """Evaluation and analysis settings."""

    which: str = "auto"
    per_channel_correlation: bool = False
    probe_size: int = 8


@dataclass
class StudyConfig:
    """Parameter-study grid run by the ``study`` command."""

    label_ratios: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.2])
    patch_sizes: list[int] = field(default_factory=lambda: [8])
    lambda_ows: list[float] = field(default_factory=lambda: [0.1])
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class ExperimentConfig:
    """Top-level experiment configuration."""

    seed: int = 0
    output_dir: Path = field(default_factory=lambda: Path("./runs/default"))
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    nets: NetsConfig = field(default_factory=NetsConfig)
    bai: BaiConfig = field(default_factory=BaiConfig)
    hdc: HdcConfig = field(default_factory=HdcConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
