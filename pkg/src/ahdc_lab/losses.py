"""Training objectives for both stages.

Every function returns a 0-dim tensor and is differentiable with respect to
all of its tensor inputs; none of them mutates its arguments.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from torch import nn

from ahdc_lab.models import OW_PAIRINGS

logger = logging.getLogger("ahdc_lab")

PROB_CLAMP = 1e-7
DICE_EPS = 1e-5


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------------------
# Weights and schedules
# ---------------------------------------------------------------------------


def ramp_weight(t: float, t_max: float) -> float:
    """``exp(-5 (1 - t/t_max)^2)``; 1.0 at ``t_max``, ``e^-5`` at 0.

    Raises:
        ValueError: If ``t_max <= 0`` or *t* lies outside ``[0, t_max]``.
    """
    if t_max <= 0:
        raise ValueError(f"t_max must be positive, got {t_max}")
    if not 0 <= t <= t_max:
        raise ValueError(f"t={t} outside [0, {t_max}]")
    return math.exp(-5.0 * (1.0 - t / t_max) ** 2)


@dataclass(frozen=True)
class RampSchedule:
    t_max: int

    def __post_init__(self) -> None:
        if self.t_max < 1:
            raise ValueError(f"t_max must be a positive integer, got {self.t_max}")

    def __call__(self, t: int) -> float:
        return ramp_weight(min(t, self.t_max), self.t_max)


@dataclass(frozen=True)
class LossWeights:
    """Fixed weights of the dual-consistency objective; the intra weight comes from the ramp."""

    lambda_super: float = 0.5
    lambda_inter: float = 1.0
    lambda_ow: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda_super", "lambda_inter", "lambda_ow"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


class UncertaintyWeights(nn.Module):
    """Learnable log-variances ``s_d`` (adversarial) and ``s_r`` (reconstruction)."""

    def __init__(self, s_d: float = 0.0, s_r: float = 0.0):
        super().__init__()
        self.s_d = nn.Parameter(torch.tensor(float(s_d)))
        self.s_r = nn.Parameter(torch.tensor(float(s_r)))


# ---------------------------------------------------------------------------
# Elementary losses
# ---------------------------------------------------------------------------


def dice_loss(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """``1 - (2 sum(pq) + eps) / (sum(p) + sum(q) + eps)`` over the whole tensor."""
    _check_same_shape(p, q, "dice_loss")
    intersection = (p * q).sum()
    return 1.0 - (2.0 * intersection + DICE_EPS) / (p.sum() + q.sum() + DICE_EPS)


def soft_cross_entropy(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of *pred* against soft *target*, predictions clamped to ``[1e-7, 1 - 1e-7]``."""
    _check_same_shape(target, pred, "soft_cross_entropy")
    pred = pred.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(target * torch.log(pred) + (1.0 - target) * torch.log(1.0 - pred)).mean()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    _check_same_shape(x, x_hat, "reconstruction_loss")
    return (x - x_hat).abs().mean()


def adversarial_losses(scores_p1: torch.Tensor, scores_p2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and label-swapped generator losses.

    Args:
        scores_p1: Discriminator probabilities on ``(x1, G1(x1))`` pairs.
        scores_p2: Discriminator probabilities on ``(G2(x2), x2)`` pairs.

    Returns:
        ``(disc_loss, gen_loss)`` with
        ``disc = -mean log s1 - mean log(1 - s2)`` and
        ``gen = -mean log(1 - s1) - mean log s2``.

    Raises:
        ValueError: If either score batch is empty.
    """
    if scores_p1.numel() == 0 or scores_p2.numel() == 0:
        raise ValueError("adversarial_losses: empty batch")
    s1 = scores_p1.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    s2 = scores_p2.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    disc = -torch.log(s1).mean() - torch.log(1.0 - s2).mean()
    gen = -torch.log(1.0 - s1).mean() - torch.log(s2).mean()
    return disc, gen


def bai_total(
    adversarial: torch.Tensor,
    rec1: torch.Tensor | None,
    rec2: torch.Tensor | None,
    s_d: torch.Tensor,
    s_r: torch.Tensor,
) -> torch.Tensor:
    """Uncertainty-weighted objective ``e^-s_d L_adv + s_d + e^-s_r (L_rec1 + L_rec2) + s_r``.

    With ``rec1`` and ``rec2`` both None the reconstruction family (and
    ``s_r``) is left out entirely.
    """
    total = torch.exp(-s_d) * adversarial + s_d
    if rec1 is None and rec2 is None:
        return total
    rec = sum(r for r in (rec1, rec2) if r is not None)
    return total + torch.exp(-s_r) * rec + s_r


# ---------------------------------------------------------------------------
# Dual-consistency terms
# ---------------------------------------------------------------------------

BranchPair = tuple[torch.Tensor, torch.Tensor | None]


def intra_consistency(y_local: torch.Tensor, y_global: torch.Tensor) -> torch.Tensor:
    """Dice agreement between the two branches of one network; gradient reaches both."""
    return dice_loss(y_local, y_global)


def inter_consistency(out1: BranchPair, out2: BranchPair, symmetric: bool = True) -> torch.Tensor:
    """Cross-entropy agreement between two networks on a matched pair.

    Targets are always detached. The symmetric form averages both directions
    per branch; the one-way form only pulls the first network toward the
    second. Missing global outputs drop the global term.
    """
    total = None
    for a, b in zip(out1, out2, strict=True):
        if a is None or b is None:
            continue
        _check_same_shape(a, b, "inter_consistency")
        if symmetric:
            term = 0.5 * (soft_cross_entropy(b.detach(), a) + soft_cross_entropy(a.detach(), b))
        else:
            term = soft_cross_entropy(b.detach(), a)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("inter_consistency: no branch outputs to compare")
    return total


def _unit_rows(w: torch.Tensor) -> tuple[torch.Tensor, int]:
    flat = w.reshape(w.shape[0], -1)
    norms = flat.norm(dim=1, keepdim=True)
    zero = norms == 0
    n_zero = int(zero.sum())
    return flat / torch.where(zero, torch.ones_like(norms), norms), n_zero


def orthogonal_weight_penalty(
    filters1: Sequence[torch.Tensor],
    filters2: Sequence[torch.Tensor],
    pairing: str = "all-pairs",
) -> torch.Tensor:
    """Mean absolute cosine between corresponding feature-layer filters of two networks.

    Each layer is a ``(K, ...)`` weight tensor whose K filters are flattened
    to vectors. ``all-pairs`` averages the K x K cosine matrix,
    ``diagonal`` averages the K matched cosines. Layers are averaged.

    Zero-norm filters contribute a cosine of 0 and log a warning.

    Raises:
        ValueError: On mismatched layer lists or an unknown pairing.
    """
    if pairing not in OW_PAIRINGS:
        raise ValueError(f"pairing must be one of {OW_PAIRINGS}, got {pairing!r}")
    if len(filters1) != len(filters2) or not filters1:
        raise ValueError(f"Expected matching non-empty layer lists, got {len(filters1)} and {len(filters2)}")

    per_layer = []
    for i, (w1, w2) in enumerate(zip(filters1, filters2, strict=True)):
        _check_same_shape(w1, w2, f"orthogonal_weight_penalty layer {i}")
        u1, z1 = _unit_rows(w1)
        u2, z2 = _unit_rows(w2)
        if z1 or z2:
            logger.warning("Layer %d has %d zero-norm filter(s); their cosines count as 0", i, z1 + z2)
        if pairing == "all-pairs":
            per_layer.append((u1 @ u2.T).abs().mean())
        else:
            per_layer.append((u1 * u2).sum(dim=1).abs().mean())
    return torch.stack(per_layer).mean()


def supervised_loss(out: BranchPair, y: torch.Tensor) -> torch.Tensor:
    """``CE(y, y_l) + dice(y, y_l)`` plus the same for the global branch when present."""
    total = None
    for pred in out:
        if pred is None:
            continue
        _check_same_shape(y, pred, "supervised_loss")
        term = soft_cross_entropy(y, pred) + dice_loss(y, pred)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("supervised_loss: no branch outputs")
    return total


@dataclass
class HdcLossParts:
    """Individual loss terms of one dual-consistency iteration."""

    o_intra1: torch.Tensor | float = 0.0
    o_intra2: torch.Tensor | float = 0.0
    o_inter: torch.Tensor | float = 0.0
    o_ow: torch.Tensor | float = 0.0
    o_super1: torch.Tensor | float = 0.0
    o_super2: torch.Tensor | float = 0.0


def hdc_total(parts: HdcLossParts, weights: LossWeights, t: int, schedule: RampSchedule) -> torch.Tensor | float:
    """Joint objective at ramp position *t*, linear in every part.

    The intra weight is ``schedule(t)``; *t* counts iterations or epochs,
    whichever unit *schedule* was built for.
    """
    ramp = schedule(t)
    return (
        weights.lambda_super * (parts.o_super1 + parts.o_super2)
        + ramp * (parts.o_intra1 + parts.o_intra2)
        + weights.lambda_inter * parts.o_inter
        + weights.lambda_ow * parts.o_ow
    )
