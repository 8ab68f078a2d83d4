"""Bidirectional adversarial domain mapping and matched-domain construction.

G1 maps domain 1 to domain 2, G2 maps back; a single discriminator T scores
joint pairs ``(x1, G1(x1))`` against ``(G2(x2), x2)``. Each step performs one
discriminator update and then one generator update on the
uncertainty-weighted adversarial + cycle-reconstruction objective.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ahdc_lab.checkpoint import load_checkpoint, load_parameters, save_checkpoint
from ahdc_lab.dataset import cycled, epoch_order, images_to_tensor
from ahdc_lab.display import training_progress
from ahdc_lab.errors import DivergenceError
from ahdc_lab.losses import UncertaintyWeights, adversarial_losses, bai_total, reconstruction_loss
from ahdc_lab.models import BaiConfig, DomainDataset, NetsConfig, Sample, Split, TensorImage
from ahdc_lab.nets import (
    DiscriminatorDescriptor,
    ModelBundle,
    build_discriminator,
    build_mapping_net,
    forward_discriminator,
    forward_mapping,
    mapping_descriptor,
)
from ahdc_lab.tensorio import load_manifest, save_manifest, write_csv

logger = logging.getLogger("ahdc_lab")

LOSS_COLUMNS = ["step", "disc_loss", "gen_loss", "rec1", "rec2", "s_d", "s_r", "lr"]
ORACLE_COLUMNS = ["epoch", "mae_adapted", "mae_identity"]

TAG_1T2 = "1t2"
TAG_2T1 = "2t1"
FROM_D1 = "from-D1"
FROM_D2 = "from-D2"


@dataclass
class BaiState:
    """Parameters, optimisers and loss history of the mapping stage."""

    g1: ModelBundle
    g2: ModelBundle
    t: ModelBundle
    weights: UncertaintyWeights
    opt_g: torch.optim.Optimizer
    opt_t: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def lr_g(self) -> float:
        return self.opt_g.param_groups[0]["lr"]

    def set_lr_g(self, lr: float) -> None:
        for group in self.opt_g.param_groups:
            group["lr"] = lr

    @property
    def s_d(self) -> float:
        return float(self.weights.s_d.detach())

    @property
    def s_r(self) -> float:
        return float(self.weights.s_r.detach())


def make_bai_state(
    g1: ModelBundle,
    g2: ModelBundle,
    t: ModelBundle,
    lr_g: float = 1e-3,
    lr_t: float = 1e-4,
) -> BaiState:
    """Wrap networks with fresh Adam optimisers; ``s_d`` and ``s_r`` share the generator optimiser."""
    weights = UncertaintyWeights()
    opt_g = torch.optim.Adam([*g1.module.parameters(), *g2.module.parameters(), *weights.parameters()], lr=lr_g)
    opt_t = torch.optim.Adam(t.module.parameters(), lr=lr_t)
    return BaiState(g1=g1, g2=g2, t=t, weights=weights, opt_g=opt_g, opt_t=opt_t)


def init_bai_state(nets: NetsConfig, bai: BaiConfig, seed: int) -> BaiState:
    descriptor = mapping_descriptor(nets)
    return make_bai_state(
        build_mapping_net(descriptor, seed, "g1"),
        build_mapping_net(descriptor, seed, "g2"),
        build_discriminator(DiscriminatorDescriptor(), seed, "t"),
        lr_g=bai.lr_g,
        lr_t=bai.lr_t,
    )


def _check_finite(step: int, batch_ids: list[str], losses: dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in losses.values()):
        raise DivergenceError("bai", step, batch_ids, losses)


def bai_step(
    state: BaiState,
    x1: torch.Tensor,
    x2: torch.Tensor,
    *,
    batch_ids: list[str] | None = None,
    use_reconstruction: bool = True,
    d_steps: int = 1,
    g_steps: int = 1,
) -> dict[str, float]:
    """One discriminator update followed by one generator update.

    Args:
        state: Mutated in place; ``step`` is incremented once.
        x1: ``(N1, 1, H, W)`` normalised batch from domain 1.
        x2: ``(N2, 1, H, W)`` normalised batch from domain 2.
        batch_ids: Sample ids of both batches, reported if a loss diverges.
        use_reconstruction: Include the cycle-reconstruction family.
        d_steps: Discriminator updates per step.
        g_steps: Generator updates per step.

    Returns:
        The recorded losses of this step (the row appended to ``history``).

    Raises:
        ValueError: If either batch is empty.
        DivergenceError: If any loss is not finite.
    """
    if x1.shape[0] == 0 or x2.shape[0] == 0:
        raise ValueError("bai_step needs non-empty batches from both domains")
    batch_ids = batch_ids or []
    s_d, s_r = state.weights.s_d, state.weights.s_r
    step = state.step + 1

    for _ in range(d_steps):
        with torch.no_grad():
            fake2 = forward_mapping(state.g1, x1)
            fake1 = forward_mapping(state.g2, x2)
        _, scores_p1 = forward_discriminator(state.t, torch.cat([x1, fake2], dim=1))
        _, scores_p2 = forward_discriminator(state.t, torch.cat([fake1, x2], dim=1))
        disc_loss, _ = adversarial_losses(scores_p1, scores_p2)
        _check_finite(step, batch_ids, {"disc_loss": float(disc_loss)})
        state.opt_t.zero_grad(set_to_none=True)
        (torch.exp(-s_d.detach()) * disc_loss).backward()
        state.opt_t.step()

    state.t.module.requires_grad_(False)
    try:
        for _ in range(g_steps):
            fake2 = forward_mapping(state.g1, x1)
            fake1 = forward_mapping(state.g2, x2)
            _, scores_p1 = forward_discriminator(state.t, torch.cat([x1, fake2], dim=1))
            _, scores_p2 = forward_discriminator(state.t, torch.cat([fake1, x2], dim=1))
            _, gen_loss = adversarial_losses(scores_p1, scores_p2)
            if use_reconstruction:
                rec1 = reconstruction_loss(x1, forward_mapping(state.g2, fake2))
                rec2 = reconstruction_loss(x2, forward_mapping(state.g1, fake1))
                total = bai_total(gen_loss, rec1, rec2, s_d, s_r)
            else:
                rec1 = rec2 = None
                total = bai_total(gen_loss, None, None, s_d, s_r)
            losses = {
                "gen_loss": float(gen_loss),
                "rec1": float(rec1) if rec1 is not None else 0.0,
                "rec2": float(rec2) if rec2 is not None else 0.0,
                "total": float(total),
            }
            _check_finite(step, batch_ids, losses)
            state.opt_g.zero_grad(set_to_none=True)
            total.backward()
            state.opt_g.step()
    finally:
        state.t.module.requires_grad_(True)

    state.step = step
    row = {
        "step": step,
        "disc_loss": float(disc_loss),
        "gen_loss": losses["gen_loss"],
        "rec1": losses["rec1"],
        "rec2": losses["rec2"],
        "s_d": state.s_d,
        "s_r": state.s_r,
        "lr": state.lr_g,
    }
    state.history.append(row)
    return row


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _lr_for(cfg: BaiConfig, epoch: int, step: int) -> float:
    if cfg.decay_every_steps:
        return cfg.lr_g * cfg.lr_decay ** (step // cfg.decay_every_steps)
    return cfg.lr_g * cfg.lr_decay**epoch


def _save(state: BaiState, path: Path) -> Path:
    return save_checkpoint(
        path,
        stage="bai",
        step=state.step,
        epoch=state.epoch,
        bundles={"g1": state.g1, "g2": state.g2, "t": state.t},
        optimizers={"g": state.opt_g, "t": state.opt_t},
        scalars={"s_d": state.s_d, "s_r": state.s_r},
        history=state.history,
    )


def restore_bai_state(path: str | Path, nets: NetsConfig, bai: BaiConfig, seed: int) -> BaiState:
    """Rebuild a :class:`BaiState` from a checkpoint so training can continue."""
    ckpt = load_checkpoint(path)
    state = init_bai_state(nets, bai, seed)
    for name in ("g1", "g2", "t"):
        load_parameters(getattr(state, name), ckpt.params[name])
    with torch.no_grad():
        state.weights.s_d.fill_(ckpt.scalars["s_d"])
        state.weights.s_r.fill_(ckpt.scalars["s_r"])
    state.opt_g.load_state_dict(ckpt.optimizers["g"])
    state.opt_t.load_state_dict(ckpt.optimizers["t"])
    state.step, state.epoch, state.history = ckpt.step, ckpt.epoch, list(ckpt.history)
    return state


def oracle_errors(g1: ModelBundle, x_a: torch.Tensor, target: torch.Tensor) -> tuple[float, float]:
    """``(MAE(G1(x_a), target), MAE(x_a, target))`` on held-out oracle pairs."""
    with torch.no_grad():
        adapted = forward_mapping(g1, x_a)
    return float(reconstruction_loss(adapted, target)), float(reconstruction_loss(x_a, target))


def train_bai(
    cfg: BaiConfig,
    nets: NetsConfig,
    d1: DomainDataset,
    d2: DomainDataset,
    out_dir: str | Path,
    seed: int,
    *,
    oracle: tuple[torch.Tensor, torch.Tensor] | None = None,
    resume_from: str | Path | None = None,
) -> BaiState:
    """Train G1, G2 and T on the training splits of *d1* and *d2*.

    Writes ``checkpoints/epoch_XXXX.ckpt`` (always at epoch 0, then every
    ``checkpoint_every`` epochs), ``checkpoints/final.ckpt``, ``losses.csv``
    and, when *oracle* is given, ``oracle.csv``.

    Args:
        oracle: ``(x_a, T*(x_a))`` tensors used to score G1 after every epoch.
        resume_from: Continue from this checkpoint instead of a fresh init.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    train1, train2 = d1.train(), d2.train()
    if not train1 or not train2:
        raise ValueError(f"Both domains need training samples, got {len(train1)} and {len(train2)}")
    x1_all = images_to_tensor(train1)
    x2_all = images_to_tensor(train2)

    if resume_from is not None:
        state = restore_bai_state(resume_from, nets, cfg, seed)
        logger.info("Resuming BAI from %s (epoch %d, step %d)", resume_from, state.epoch, state.step)
    else:
        state = init_bai_state(nets, cfg, seed)
        _save(state, ckpt_dir / "epoch_0000.ckpt")

    oracle_rows: list[dict] = []
    if oracle is not None and oracle[0].shape[0] > 0:
        mae_adapted, mae_identity = oracle_errors(state.g1, *oracle)
        oracle_rows.append({"epoch": state.epoch, "mae_adapted": mae_adapted, "mae_identity": mae_identity})

    n_large = max(len(train1), len(train2))
    steps_per_epoch = math.ceil(n_large / cfg.batch_size)
    with training_progress() as progress:
        for epoch in range(state.epoch, cfg.epochs):
            state.set_lr_g(_lr_for(cfg, epoch, state.step))
            order1 = epoch_order(len(train1), seed, f"bai:epoch:{epoch}:d1")
            order2 = epoch_order(len(train2), seed, f"bai:epoch:{epoch}:d2")
            task = progress.add_task(f"BAI epoch {epoch + 1}/{cfg.epochs}", total=steps_per_epoch)
            for b in range(steps_per_epoch):
                # Every batch is full; the shorter order wraps around.
                idx1 = cycled(order1, b * cfg.batch_size, cfg.batch_size)
                idx2 = cycled(order2, b * cfg.batch_size, cfg.batch_size)
                ids = [train1[i].id for i in idx1] + [train2[i].id for i in idx2]
                bai_step(
                    state,
                    x1_all[idx1],
                    x2_all[idx2],
                    batch_ids=ids,
                    use_reconstruction=cfg.use_reconstruction,
                    d_steps=cfg.d_steps,
                    g_steps=cfg.g_steps,
                )
                if cfg.decay_every_steps:
                    state.set_lr_g(_lr_for(cfg, epoch, state.step))
                progress.advance(task)
            progress.remove_task(task)
            state.epoch = epoch + 1

            epoch_rows = state.history[-steps_per_epoch:]
            logger.info(
                "BAI epoch %d/%d: disc=%.4f gen=%.4f rec=%.4f s_d=%.3f s_r=%.3f lr=%.6g",
                state.epoch,
                cfg.epochs,
                float(np.mean([r["disc_loss"] for r in epoch_rows])),
                float(np.mean([r["gen_loss"] for r in epoch_rows])),
                float(np.mean([r["rec1"] + r["rec2"] for r in epoch_rows])),
                state.s_d,
                state.s_r,
                state.lr_g,
            )
            if oracle is not None and oracle[0].shape[0] > 0:
                mae_adapted, mae_identity = oracle_errors(state.g1, *oracle)
                oracle_rows.append({"epoch": state.epoch, "mae_adapted": mae_adapted, "mae_identity": mae_identity})
                logger.info("Oracle MAE: adapted=%.4f identity=%.4f", mae_adapted, mae_identity)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                _save(state, ckpt_dir / f"epoch_{state.epoch:04d}.ckpt")

    # The rate the next epoch would start with, so a resumed run matches.
    state.set_lr_g(_lr_for(cfg, state.epoch, state.step))
    _save(state, ckpt_dir / "final.ckpt")
    write_csv(out_dir / "losses.csv", LOSS_COLUMNS, state.history)
    if oracle_rows:
        write_csv(out_dir / "oracle.csv", ORACLE_COLUMNS, oracle_rows)
    return state


# ---------------------------------------------------------------------------
# Adaptation and matched domains
# ---------------------------------------------------------------------------


def adapt_domain(
    g: ModelBundle,
    d: DomainDataset,
    tag: str,
    domain: str | None = None,
) -> DomainDataset:
    """Map every sample of *d* through *g*.

    Masks and splits are copied unchanged; ids get an ``@<tag>`` suffix and
    the domain tag becomes *domain* (the target domain) when given. Samples
    are mapped one at a time, so batch-norm statistics come from the sample
    itself and an adapted image does not depend on the rest of *d*.
    """
    name = f"{d.name}@{tag}"
    if len(d) == 0:
        return DomainDataset(name, ())
    adapted: list[Sample] = []
    for sample in d.samples:
        with torch.no_grad():
            plane = forward_mapping(g, images_to_tensor([sample]))[0, 0].cpu().numpy()
        adapted.append(
            sample.replace(
                id=f"{sample.id}@{tag}",
                image=TensorImage(plane, spacing=sample.image.spacing),
                domain=domain or sample.domain,
            )
        )
    return DomainDataset(name, tuple(adapted))


@dataclass(frozen=True)
class PairEntry:
    id_p1: str
    id_p2: str
    origin: str


@dataclass
class MatchedDomains:
    """Two equally sized datasets with a bijective sample pairing."""

    d_p1: DomainDataset
    d_p2: DomainDataset
    pairing: list[PairEntry]

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """Raises ValueError if the pairing is not a bijection or the partitions disagree."""
        if len(self.d_p1) != len(self.d_p2) or len(self.pairing) != len(self.d_p1):
            raise ValueError(
                f"Matched domains must have equal sizes: |d_p1|={len(self.d_p1)}, |d_p2|={len(self.d_p2)}, "
                f"pairs={len(self.pairing)}"
            )
        ids1 = Counter(p.id_p1 for p in self.pairing)
        ids2 = Counter(p.id_p2 for p in self.pairing)
        if set(ids1) != {s.id for s in self.d_p1} or set(ids2) != {s.id for s in self.d_p2}:
            raise ValueError("Pairing does not cover both matched domains")
        if max(ids1.values(), default=1) > 1 or max(ids2.values(), default=1) > 1:
            raise ValueError("Pairing is not a bijection")
        for p in self.pairing:
            if p.origin not in (FROM_D1, FROM_D2):
                raise ValueError(f"Unknown pairing origin {p.origin!r}")
            if self.d_p1.get(p.id_p1).split is not self.d_p2.get(p.id_p2).split:
                raise ValueError(f"Pair ({p.id_p1}, {p.id_p2}) spans different splits")
        if self.d_p1.counts != self.d_p2.counts:
            raise ValueError(f"Partition counts differ: {self.d_p1.counts} vs {self.d_p2.counts}")

    def pairs(self, split: Split) -> list[tuple[Sample, Sample]]:
        """Matched ``(x_p1, x_p2)`` samples whose split is *split*, in pairing order."""
        out = []
        for p in self.pairing:
            s1 = self.d_p1.get(p.id_p1)
            if s1.split is split:
                out.append((s1, self.d_p2.get(p.id_p2)))
        return out

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        save_manifest(self.d_p1, out_dir / "d_p1.json")
        save_manifest(self.d_p2, out_dir / "d_p2.json")
        rows = [{"id_p1": p.id_p1, "id_p2": p.id_p2, "origin": p.origin} for p in self.pairing]
        (out_dir / "pairing.json").write_text(json.dumps(rows, indent=2) + "\n")

    @classmethod
    def load(cls, out_dir: str | Path) -> MatchedDomains:
        out_dir = Path(out_dir)
        pairing_path = out_dir / "pairing.json"
        if not pairing_path.exists():
            raise FileNotFoundError(f"Pairing not found: {pairing_path}")
        rows = json.loads(pairing_path.read_text())
        return cls(
            d_p1=load_manifest(out_dir / "d_p1.json"),
            d_p2=load_manifest(out_dir / "d_p2.json"),
            pairing=[PairEntry(r["id_p1"], r["id_p2"], r["origin"]) for r in rows],
        )


def _demote(d: DomainDataset) -> list[Sample]:
    """Second-domain training samples enter the matched domains as unlabelled."""
    return [s.replace(split=Split.TRAIN_UNLABELLED) if s.split is Split.TRAIN_LABELLED else s for s in d.samples]


def build_matched_domains(
    d1: DomainDataset,
    d2: DomainDataset,
    g1: ModelBundle,
    g2: ModelBundle,
) -> MatchedDomains:
    """``D_p1 = D1 ∪ G2(D2)`` and ``D_p2 = G1(D1) ∪ D2`` with index-aligned pairing.

    Labelled samples come from D1 only; their masks are carried to the
    adapted copies unchanged.
    """
    d2_samples = d2.with_samples(_demote(d2))
    d1t2 = adapt_domain(g1, d1, TAG_1T2, domain=d2.name)
    d2t1 = adapt_domain(g2, d2_samples, TAG_2T1, domain=d1.name)

    d_p1 = DomainDataset("d_p1", tuple(d1.samples) + d2t1.samples)
    d_p2 = DomainDataset("d_p2", d1t2.samples + d2_samples.samples)
    pairing = [PairEntry(s.id, a.id, FROM_D1) for s, a in zip(d1.samples, d1t2.samples, strict=True)]
    pairing += [PairEntry(a.id, s.id, FROM_D2) for s, a in zip(d2_samples.samples, d2t1.samples, strict=True)]
    matched = MatchedDomains(d_p1=d_p1, d_p2=d_p2, pairing=pairing)
    logger.info(
        "Matched domains: %d pairs (%d from D1, %d from D2), counts %s",
        len(pairing),
        len(d1),
        len(d2),
        d_p1.counts,
    )
    return matched
