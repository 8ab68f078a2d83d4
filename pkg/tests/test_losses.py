"""Tests for the training objectives."""

from __future__ import annotations

import logging
import math

import pytest
import torch

from ahdc_lab.losses import (
    HdcLossParts,
    LossWeights,
    RampSchedule,
    UncertaintyWeights,
    adversarial_losses,
    bai_total,
    dice_loss,
    hdc_total,
    inter_consistency,
    intra_consistency,
    orthogonal_weight_penalty,
    ramp_weight,
    reconstruction_loss,
    soft_cross_entropy,
    supervised_loss,
)

LOG2 = math.log(2.0)


def _bits(*values: float) -> torch.Tensor:
    return torch.tensor(values, dtype=torch.float32)


class TestRamp:
    def test_start(self):
        assert ramp_weight(0, 100) == pytest.approx(0.00673794699)

    def test_midpoint(self):
        assert ramp_weight(50, 100) == pytest.approx(0.2865048, rel=1e-6)

    def test_end(self):
        assert ramp_weight(100, 100) == 1.0

    def test_monotonic(self):
        values = [ramp_weight(t, 20) for t in range(21)]
        assert values == sorted(values)

    def test_invalid(self):
        with pytest.raises(ValueError, match="t_max"):
            ramp_weight(0, 0)
        with pytest.raises(ValueError, match="outside"):
            ramp_weight(11, 10)

    def test_schedule_clamps_past_horizon(self):
        ramp = RampSchedule(10)
        assert ramp(25) == 1.0
        with pytest.raises(ValueError):
            RampSchedule(0)


class TestDiceLoss:
    def test_disjoint(self):
        p = _bits(1, 1, 1, 1, 0, 0, 0, 0)
        q = _bits(0, 0, 0, 0, 1, 1, 1, 1)
        assert float(dice_loss(p, q)) == pytest.approx(0.99999875, abs=1e-7)

    def test_half_overlap(self):
        p = _bits(1, 1, 1, 1, 0, 0)
        q = _bits(0, 0, 1, 1, 1, 1)
        assert float(dice_loss(p, q)) == pytest.approx(0.5, abs=1e-5)

    def test_identical(self):
        p = _bits(1, 0, 1)
        assert float(dice_loss(p, p)) == pytest.approx(0.0, abs=1e-6)

    def test_symmetric(self):
        gen = torch.Generator().manual_seed(0)
        p, q = torch.rand(8, 8, generator=gen), torch.rand(8, 8, generator=gen)
        assert torch.equal(dice_loss(p, q), dice_loss(q, p))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            dice_loss(torch.zeros(3), torch.zeros(4))


class TestSoftCrossEntropy:
    def test_half(self):
        t = torch.full((4,), 0.5)
        assert float(soft_cross_entropy(t, t)) == pytest.approx(LOG2, rel=1e-6)

    def test_clamped_prediction(self):
        loss = soft_cross_entropy(torch.ones(1), torch.zeros(1) + 1e-7)
        assert float(loss) == pytest.approx(16.118, abs=1e-2)

    def test_zero_prediction_is_finite(self):
        assert math.isfinite(float(soft_cross_entropy(torch.ones(2), torch.zeros(2))))


class TestReconstructionLoss:
    def test_checkerboard(self):
        x = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert float(reconstruction_loss(x, torch.full((2, 2), 0.5))) == pytest.approx(0.5)


class TestAdversarialLosses:
    def test_undecided_discriminator(self):
        s = torch.full((3,), 0.5)
        disc, gen = adversarial_losses(s, s)
        assert float(disc) == pytest.approx(2 * LOG2, rel=1e-6)
        assert float(disc + gen) == pytest.approx(4 * LOG2, rel=1e-6)

    def test_confident_discriminator(self):
        disc, gen = adversarial_losses(torch.full((2,), 0.99), torch.full((2,), 0.01))
        assert float(disc) < 0.05
        assert float(gen) > 5.0

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty batch"):
            adversarial_losses(torch.zeros(0), torch.ones(1))


class TestBaiTotal:
    def test_unit_example(self):
        total = bai_total(torch.tensor(1.0), torch.tensor(0.5), torch.tensor(0.5), torch.tensor(0.0), torch.tensor(0.0))
        assert float(total) == pytest.approx(2.0)

    def test_without_reconstruction(self):
        s_d = torch.tensor(0.5)
        total = bai_total(torch.tensor(1.0), None, None, s_d, torch.tensor(3.0))
        assert float(total) == pytest.approx(math.exp(-0.5) + 0.5)

    def test_gradient_reaches_log_variances(self):
        w = UncertaintyWeights()
        total = bai_total(torch.tensor(2.0), torch.tensor(0.2), torch.tensor(0.3), w.s_d, w.s_r)
        total.backward()
        assert float(w.s_d.grad) == pytest.approx(1.0 - 2.0)
        assert float(w.s_r.grad) == pytest.approx(1.0 - 0.5)


class TestIntraConsistency:
    def test_agreement_is_zero(self):
        y = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        assert float(intra_consistency(y, y)) == pytest.approx(0.0, abs=1e-6)

    def test_gradient_reaches_both_branches(self):
        a = torch.rand(1, 1, 4, 4, requires_grad=True)
        b = torch.rand(1, 1, 4, 4, requires_grad=True)
        intra_consistency(a, b).backward()
        assert a.grad is not None and a.grad.abs().sum() > 0
        assert b.grad is not None and b.grad.abs().sum() > 0


class TestInterConsistency:
    def test_all_half(self):
        half = torch.full((1, 1, 2, 2), 0.5)
        loss = inter_consistency((half, half), (half, half))
        assert float(loss) == pytest.approx(2 * LOG2, rel=1e-6)

    def test_targets_are_detached_in_one_way_mode(self):
        a = torch.rand(1, 1, 2, 2, requires_grad=True)
        b = torch.rand(1, 1, 2, 2, requires_grad=True)
        inter_consistency((a, None), (b, None), symmetric=False).backward()
        assert a.grad is not None
        assert b.grad is None

    def test_symmetric_pulls_both(self):
        a = torch.rand(1, 1, 2, 2, requires_grad=True)
        b = torch.rand(1, 1, 2, 2, requires_grad=True)
        inter_consistency((a, None), (b, None)).backward()
        assert a.grad is not None
        assert b.grad is not None

    def test_swap_invariant(self):
        gen = torch.Generator().manual_seed(1)
        out1 = (torch.rand(1, 1, 8, 8, generator=gen), torch.rand(1, 1, 8, 8, generator=gen))
        out2 = (torch.rand(1, 1, 8, 8, generator=gen), torch.rand(1, 1, 8, 8, generator=gen))
        assert float(inter_consistency(out1, out2)) == pytest.approx(float(inter_consistency(out2, out1)), rel=1e-12)

    def test_missing_global_drops_term(self):
        half = torch.full((1, 1, 2, 2), 0.5)
        assert float(inter_consistency((half, None), (half, None))) == pytest.approx(LOG2, rel=1e-6)

    def test_nothing_to_compare(self):
        with pytest.raises(ValueError):
            inter_consistency((None, None), (None, None))


class TestOrthogonalWeightPenalty:
    def test_identity_filters(self):
        w = torch.eye(2).reshape(2, 2, 1, 1)
        assert float(orthogonal_weight_penalty([w], [w])) == pytest.approx(0.5)

    def test_identity_filters_diagonal(self):
        w = torch.eye(2).reshape(2, 2, 1, 1)
        assert float(orthogonal_weight_penalty([w], [w], pairing="diagonal")) == pytest.approx(1.0)

    def test_identical_single_filter(self):
        w = torch.tensor([[3.0, -1.0, 2.0]])
        assert float(orthogonal_weight_penalty([w], [w])) == pytest.approx(1.0)

    def test_orthogonal_filters(self):
        w1 = torch.tensor([[1.0, 0.0]])
        w2 = torch.tensor([[0.0, 2.0]])
        assert float(orthogonal_weight_penalty([w1], [w2])) == pytest.approx(0.0)

    def test_layers_are_averaged(self):
        same = torch.tensor([[1.0, 0.0]])
        orth = torch.tensor([[0.0, 1.0]])
        loss = orthogonal_weight_penalty([same, same], [same, orth])
        assert float(loss) == pytest.approx(0.5)

    def test_zero_filter_warns(self, caplog):
        w1 = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
        w2 = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
        with caplog.at_level(logging.WARNING, logger="ahdc_lab"):
            loss = orthogonal_weight_penalty([w1], [w2], pairing="diagonal")
        assert float(loss) == pytest.approx(0.5)
        assert "zero-norm" in caplog.text

    def test_differentiable(self):
        w1 = torch.rand(3, 2, 3, 3, requires_grad=True)
        w2 = torch.rand(3, 2, 3, 3, requires_grad=True)
        orthogonal_weight_penalty([w1], [w2]).backward()
        assert w1.grad is not None
        assert w2.grad is not None

    def test_mismatched_layers(self):
        with pytest.raises(ValueError, match="matching non-empty"):
            orthogonal_weight_penalty([torch.ones(1, 2)], [])

    def test_unknown_pairing(self):
        with pytest.raises(ValueError, match="pairing"):
            orthogonal_weight_penalty([torch.ones(1, 2)], [torch.ones(1, 2)], pairing="random")


class TestSupervisedLoss:
    def test_perfect_prediction(self):
        y = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        loss = supervised_loss((y, None), y)
        assert float(loss) < 1e-4

    def test_global_branch_adds_term(self):
        y = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        half = torch.full((2, 2), 0.5)
        one = supervised_loss((half, None), y)
        two = supervised_loss((half, half), y)
        assert float(two) == pytest.approx(2 * float(one))


class TestHdcTotal:
    def test_unit_parts_at_horizon(self):
        parts = HdcLossParts(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
        assert hdc_total(parts, LossWeights(), t=10, schedule=RampSchedule(10)) == pytest.approx(4.1)

    def test_intra_follows_ramp(self):
        parts = HdcLossParts(o_intra1=2.0)
        total = hdc_total(parts, LossWeights(), t=5, schedule=RampSchedule(10))
        assert total == pytest.approx(2.0 * ramp_weight(5, 10))

    def test_zero_weights_and_agreeing_branches(self):
        parts = HdcLossParts(0.0, 0.0, 3.0, 3.0, 3.0, 3.0)
        weights = LossWeights(lambda_super=0.0, lambda_inter=0.0, lambda_ow=0.0)
        assert hdc_total(parts, weights, t=0, schedule=RampSchedule(4)) == 0.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="lambda_ow"):
            LossWeights(lambda_ow=-1.0)


GRAD_STEP = 1e-4
GRAD_RTOL = 1e-5
GRAD_ATOL = 1e-8


@pytest.fixture
def gen() -> torch.Generator:
    return torch.Generator().manual_seed(2024)


def _probs(gen: torch.Generator, *shape: int) -> torch.Tensor:
    """Probabilities in [0.2, 0.8], clear of the clamps, as a float64 leaf."""
    shape = shape or (8, 8)
    return (0.2 + 0.6 * torch.rand(*shape, generator=gen, dtype=torch.float64)).requires_grad_()


def _mask(gen: torch.Generator) -> torch.Tensor:
    return (torch.rand(8, 8, generator=gen, dtype=torch.float64) > 0.5).double()


def _matches_finite_differences(fn, *inputs: torch.Tensor) -> bool:
    return torch.autograd.gradcheck(fn, inputs, eps=GRAD_STEP, atol=GRAD_ATOL, rtol=GRAD_RTOL)


class TestGradients:
    """Analytic gradients against central finite differences on random 8x8 float64 inputs."""

    def test_dice_loss(self, gen):
        assert _matches_finite_differences(dice_loss, _probs(gen), _probs(gen))

    def test_soft_cross_entropy(self, gen):
        target = _mask(gen).requires_grad_()
        assert _matches_finite_differences(soft_cross_entropy, target, _probs(gen))

    def test_reconstruction_loss(self, gen):
        x = _probs(gen)
        sign = (torch.rand(8, 8, generator=gen, dtype=torch.float64) > 0.5).double() * 2.0 - 1.0
        offset = sign * (0.05 + 0.1 * torch.rand(8, 8, generator=gen, dtype=torch.float64))
        x_hat = (x.detach() + offset).requires_grad_()
        assert _matches_finite_differences(reconstruction_loss, x, x_hat)

    def test_adversarial_losses(self, gen):
        assert _matches_finite_differences(adversarial_losses, _probs(gen, 64), _probs(gen, 64))

    def test_bai_total(self, gen):
        def objective(s1, s2, x, x_hat, s_d, s_r):
            _, adv = adversarial_losses(s1.flatten(), s2.flatten())
            return bai_total(adv, reconstruction_loss(x, x_hat), reconstruction_loss(x_hat, x - 0.3), s_d, s_r)

        x = _probs(gen)
        x_hat = (x.detach() + 0.1).requires_grad_()
        s_d = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
        s_r = torch.tensor(-0.4, dtype=torch.float64, requires_grad=True)
        assert _matches_finite_differences(objective, _probs(gen), _probs(gen), x, x_hat, s_d, s_r)

    def test_intra_consistency(self, gen):
        assert _matches_finite_differences(intra_consistency, _probs(gen), _probs(gen))

    def test_inter_consistency_one_way(self, gen):
        local2, global2 = _probs(gen).detach(), _probs(gen).detach()

        def pull(local1, global1):
            return inter_consistency((local1, global1), (local2, global2), symmetric=False)

        assert _matches_finite_differences(pull, _probs(gen), _probs(gen))

    def test_inter_consistency_symmetric_halves_the_pull(self, gen):
        a, b = _probs(gen), _probs(gen)
        (one_way,) = torch.autograd.grad(inter_consistency((a, None), (b.detach(), None), symmetric=False), a)
        (symmetric,) = torch.autograd.grad(inter_consistency((a, None), (b, None)), a)
        assert torch.allclose(symmetric, 0.5 * one_way, rtol=1e-12, atol=0.0)

    @pytest.mark.parametrize("pairing", ["all-pairs", "diagonal"])
    def test_orthogonal_weight_penalty(self, gen, pairing):
        w1a, w1b, w2a, w2b = (_probs(gen) for _ in range(4))

        def penalty(w1a, w1b, w2a, w2b):
            return orthogonal_weight_penalty([w1a, w1b], [w2a, w2b], pairing=pairing)

        assert _matches_finite_differences(penalty, w1a, w1b, w2a, w2b)

    def test_supervised_loss(self, gen):
        y = _mask(gen)
        def supervised(local, glob):
            return supervised_loss((local, glob), y)

        assert _matches_finite_differences(supervised, _probs(gen), _probs(gen))

    def test_hdc_total(self, gen):
        parts = [torch.rand((), generator=gen, dtype=torch.float64).requires_grad_() for _ in range(6)]
        schedule = RampSchedule(10)
        assert _matches_finite_differences(
            lambda *p: hdc_total(HdcLossParts(*p), LossWeights(), t=3, schedule=schedule), *parts
        )
