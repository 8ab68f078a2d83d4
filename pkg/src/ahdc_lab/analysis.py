"""Distribution and representation analyses.

- :func:`pca_project`: principal-component projection of flattened images,
  used to compare source, target and adapted domains.
- :func:`feature_correlation`: per-layer |Pearson| between the feature
  activations of two dual-modelling networks on the same probe batch.
- :func:`branch_divergence`: per-pixel disagreement between the local and
  global branch of one network.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from ahdc_lab.models import Sample, TensorImage
from ahdc_lab.nets import DualNetDescriptor, ModelBundle, forward_dual
from ahdc_lab.tensorio import write_csv

logger = logging.getLogger("ahdc_lab")


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionRow:
    id: str
    domain: str
    coords: tuple[float, ...]

    @property
    def pc1(self) -> float:
        return self.coords[0]

    @property
    def pc2(self) -> float:
        return self.coords[1]


@dataclass
class Projection2D:
    """Projected rows in input order, components by descending explained variance."""

    rows: list[ProjectionRow]
    components: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray

    def write(self, path) -> None:
        k = self.components.shape[0]
        columns = ["id", "domain"] + [f"pc{i + 1}" for i in range(k)]
        write_csv(
            path,
            columns,
            [
                {"id": r.id, "domain": r.domain, **{f"pc{i + 1}": float(c) for i, c in enumerate(r.coords)}}
                for r in self.rows
            ],
        )

    def transform(self, images: Sequence[TensorImage]) -> np.ndarray:
        """Project further images with the fitted mean and components."""
        x = np.stack([np.asarray(t.values, dtype=np.float64).ravel() for t in images])
        return (x - self.mean) @ self.components.T


def pca_project(
    images: Sequence[TensorImage],
    k: int = 2,
    ids: Sequence[str] | None = None,
    domains: Sequence[str] | None = None,
) -> Projection2D:
    """Project mean-centred flattened images onto their top-*k* principal directions.

    Each component is sign-fixed so that its largest-magnitude loading is positive.

    Raises:
        ValueError: With fewer than ``k + 1`` images, mismatched shapes, or
            more components than pixels.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(images) < k + 1:
        raise ValueError(f"rank deficiency: {len(images)} image(s) cannot span {k} components")
    shapes = {t.values.shape for t in images}
    if len(shapes) != 1:
        raise ValueError(f"Images must share one shape, got {sorted(shapes)}")
    x = np.stack([np.asarray(t.values, dtype=np.float64).ravel() for t in images])
    if k > x.shape[1]:
        raise ValueError(f"rank deficiency: {x.shape[1]} pixels cannot span {k} components")

    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    components = vt[:k].copy()
    for i in range(k):
        if components[i, np.argmax(np.abs(components[i]))] < 0:
            components[i] = -components[i]
    coords = centred @ components.T
    explained = (s[:k] ** 2) / (len(images) - 1)

    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    domains = list(domains) if domains is not None else [""] * len(images)
    rows = [ProjectionRow(i, d, tuple(float(c) for c in row)) for i, d, row in zip(ids, domains, coords, strict=True)]
    return Projection2D(rows=rows, components=components, mean=mean, explained_variance=explained)


def project_samples(samples: Sequence[Sample], k: int = 2) -> Projection2D:
    return pca_project([s.image for s in samples], k, ids=[s.id for s in samples], domains=[s.domain for s in samples])


# ---------------------------------------------------------------------------
# Feature correlation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerCorrelation:
    layer: str
    abs_pearson: float


def abs_pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """|Pearson r| of two flattened arrays; None when either has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return None
    return float(min(1.0, abs((a * b).sum()) / denom))


def feature_activations(s: ModelBundle, probe: torch.Tensor) -> dict[str, np.ndarray]:
    """Outputs of every feature-extractor stage on *probe*, keyed by stage name."""
    captured: dict[str, np.ndarray] = {}
    handles = []
    for name, block in s.module.feature.blocks():
        handles.append(
            block.register_forward_hook(
                lambda _m, _inp, out, name=name: captured.__setitem__(name, out.detach().cpu().numpy())
            )
        )
    try:
        with torch.no_grad():
            forward_dual(s, probe)
    finally:
        for h in handles:
            h.remove()
    return captured


def correlate_activations(
    acts1: dict[str, np.ndarray], acts2: dict[str, np.ndarray], per_channel: bool = False
) -> list[LayerCorrelation]:
    """Per-layer |Pearson| between two activation sets with the same layer names."""
    if list(acts1) != list(acts2):
        raise ValueError("Activation sets have different layers")
    result = []
    for layer in acts1:
        a, b = acts1[layer], acts2[layer]
        if a.shape != b.shape:
            raise ValueError(f"Layer {layer}: activation shapes differ {a.shape} vs {b.shape}")
        if per_channel:
            values = [abs_pearson(a[:, c], b[:, c]) for c in range(a.shape[1])]
            defined = [v for v in values if v is not None]
            if len(defined) < len(values):
                logger.warning("Layer %s: %d zero-variance channel(s) reported as 0", layer, len(values) - len(defined))
            value = float(np.mean([v if v is not None else 0.0 for v in values]))
        else:
            r = abs_pearson(a, b)
            if r is None:
                logger.warning("Layer %s: zero-variance activations, reported as 0", layer)
            value = 0.0 if r is None else r
        result.append(LayerCorrelation(layer, value))
    return result


def feature_correlation(
    s1: ModelBundle, s2: ModelBundle, probe: torch.Tensor, per_channel: bool = False
) -> list[LayerCorrelation]:
    """Per-layer |Pearson| between the feature activations of two networks.

    Raises:
        ValueError: If the feature extractors have different descriptors.
    """
    if s1.descriptor.feature != s2.descriptor.feature:
        raise ValueError("Feature extractors must share one descriptor")
    return correlate_activations(feature_activations(s1, probe), feature_activations(s2, probe), per_channel)


def mean_correlation(layers: Sequence[LayerCorrelation]) -> float:
    return float(np.mean([c.abs_pearson for c in layers])) if layers else 0.0


def write_featcorr(path, layers: Sequence[LayerCorrelation]) -> None:
    rows = [{"layer": c.layer, "abs_pearson": c.abs_pearson} for c in layers]
    rows.append({"layer": "mean", "abs_pearson": mean_correlation(layers)})
    write_csv(path, ["layer", "abs_pearson"], rows)


# ---------------------------------------------------------------------------
# Branch divergence
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BranchDivergence:
    id: str
    mean_abs_diff: float
    diff_map: TensorImage


def branch_divergence(s: ModelBundle, samples: Sequence[Sample], probe: torch.Tensor) -> list[BranchDivergence]:
    """``|local - global|`` maps for each probe item.

    Raises:
        ValueError: If the network has no second branch.
    """
    if not isinstance(s.descriptor, DualNetDescriptor) or s.descriptor.branch_kinds[1] is None:
        raise ValueError("Branch divergence needs a network with two branches")
    with torch.no_grad():
        out = forward_dual(s, probe)
    diff = (out.local - out.global_).abs()[:, 0].cpu().numpy()
    return [
        BranchDivergence(sample.id, float(d.mean()), TensorImage(d, spacing=sample.image.spacing))
        for sample, d in zip(samples, diff, strict=True)
    ]
