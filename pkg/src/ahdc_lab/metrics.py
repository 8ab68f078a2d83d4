"""Segmentation metrics (DSC, Jaccard, ASD) and test-set evaluation reports."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from ahdc_lab.env import ENV
from ahdc_lab.hdc import HdcState, predict
from ahdc_lab.models import DomainDataset, LabelMask
from ahdc_lab.tensorio import write_csv

logger = logging.getLogger("ahdc_lab")

REPORT_COLUMNS = ["id", "dsc", "ji", "asd_mm"]
# Foreground pixels with at least one background pixel among their 4 neighbours form the boundary.
_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _as_bool(m: LabelMask | np.ndarray) -> np.ndarray:
    return m.as_bool() if isinstance(m, LabelMask) else np.asarray(m, dtype=bool)


def _pair(a: LabelMask | np.ndarray, b: LabelMask | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"Mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a: LabelMask | np.ndarray, b: LabelMask | np.ndarray) -> float:
    """Dice similarity coefficient ``2|a∩b| / (|a|+|b|)``.

    Raises:
        ValueError: If both masks are empty ("undefined DSC") or shapes differ.
    """
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        raise ValueError("undefined DSC: both masks are empty")
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def jaccard(a: LabelMask | np.ndarray, b: LabelMask | np.ndarray) -> float:
    """Jaccard index ``|a∩b| / |a∪b|``.

    Raises:
        ValueError: If both masks are empty or shapes differ.
    """
    a, b = _pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        raise ValueError("undefined Jaccard index: both masks are empty")
    return int(np.logical_and(a, b).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background; outside the image counts as background."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FOUR_CONNECTED, border_value=0)


def asd(
    a: LabelMask | np.ndarray,
    b: LabelMask | np.ndarray,
    spacing: tuple[float, float] | None = None,
) -> float:
    """Symmetric average surface distance in physical units.

    Args:
        spacing: ``(dy, dx)``; defaults to the spacing of *a* when it is a
            :class:`LabelMask`, else ``(1, 1)``.

    Raises:
        ValueError: If either mask is empty ("undefined surface distance").
    """
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelMask) else (1.0, 1.0)
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise ValueError("undefined surface distance: empty mask")
    border_a, border_b = boundary(a), boundary(b)
    # EDT of the complement gives, at every pixel, the distance to the nearest boundary pixel.
    to_b = ndimage.distance_transform_edt(~border_b, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~border_a, sampling=spacing)
    total = float(to_b[border_a].sum()) + float(to_a[border_b].sum())
    return total / (int(border_a.sum()) + int(border_b.sum()))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    id: str
    dsc: float
    ji: float
    asd_mm: float


def _aggregate(values: list[float]) -> dict[str, float | None]:
    if not values:
        return {"mean": None, "std": None}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


@dataclass
class MetricReport:
    """Per-sample rows sorted by id; aggregates are recomputed from the rows."""

    rows: list[MetricRow] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rows = sorted(self.rows, key=lambda r: r.id)
        self.excluded = sorted(self.excluded)

    def summary(self) -> dict:
        return {
            "n": len(self.rows),
            "dsc": _aggregate([r.dsc for r in self.rows]),
            "ji": _aggregate([r.ji for r in self.rows]),
            "asd": _aggregate([r.asd_mm for r in self.rows]),
            "excluded": list(self.excluded),
        }

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        """Write ``report.csv`` and ``summary.json`` into *out_dir*."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = write_csv(
            out_dir / "report.csv",
            REPORT_COLUMNS,
            [{"id": r.id, "dsc": r.dsc, "ji": r.ji, "asd_mm": r.asd_mm} for r in self.rows],
        )
        summary = out_dir / "summary.json"
        summary.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return report, summary


def score_sample(sample_id: str, pred: LabelMask, truth: LabelMask) -> MetricRow | None:
    """All three metrics for one sample, or None when any of them is undefined."""
    if pred.area == 0 or truth.area == 0:
        return None
    return MetricRow(
        id=sample_id,
        dsc=dsc(pred, truth),
        ji=jaccard(pred, truth),
        asd_mm=asd(pred, truth, spacing=truth.spacing),
    )


def evaluate_dataset(state: HdcState, dataset: DomainDataset, which: str = "auto") -> MetricReport:
    """Predict every test sample with the local branch and score it.

    Samples whose prediction or ground truth is empty (or that have no mask)
    are excluded from the rows and listed in ``excluded``.

    Raises:
        ValueError: If the dataset has no test samples.
    """
    test = dataset.test()
    if not test:
        raise ValueError(f"Dataset '{dataset.name}' has no test samples")

    preds = [predict(state, s.image, which=which, domain=s.domain)[1] for s in test]

    def _score(args):
        sample, pred = args
        if sample.mask is None:
            return sample.id, None
        return sample.id, score_sample(sample.id, pred, sample.mask)

    with ThreadPoolExecutor(max_workers=ENV.threads) as pool:
        results = list(pool.map(_score, zip(test, preds, strict=True)))

    rows = [row for _, row in results if row is not None]
    excluded = [sample_id for sample_id, row in results if row is None]
    if excluded:
        logger.warning("Excluded %d sample(s) with undefined metrics: %s", len(excluded), ", ".join(excluded))
    return MetricReport(rows=rows, excluded=excluded)
