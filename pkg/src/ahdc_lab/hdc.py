"""Hierarchical dual-consistency segmentation training and inference.

S1 learns on the first matched domain, S2 on the second. Every iteration runs
three sequential updates:

1. intra: ramp-weighted dice agreement between the local and global branch of
   each network, plus the orthogonal-weight penalty;
2. inter: cross-entropy agreement between S1 and S2 on matched pairs, plus the
   orthogonal-weight penalty;
3. supervised: cross-entropy + dice against the labels on the labelled pairs.

A phase whose weight is zero, or whose batch is empty, is skipped entirely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ahdc_lab.bai import MatchedDomains
from ahdc_lab.checkpoint import load_checkpoint, load_parameters, save_checkpoint
from ahdc_lab.dataset import cycled, epoch_order, images_to_tensor, masks_to_tensor, random_angles, rotate_batch
from ahdc_lab.display import training_progress
from ahdc_lab.errors import DivergenceError
from ahdc_lab.losses import (
    HdcLossParts,
    LossWeights,
    RampSchedule,
    hdc_total,
    inter_consistency,
    intra_consistency,
    orthogonal_weight_penalty,
    supervised_loss,
)
from ahdc_lab.models import WHICH_CHOICES, HdcConfig, LabelMask, NetsConfig, Sample, Split, TensorImage
from ahdc_lab.nets import ModelBundle, build_dual_net, dual_descriptor, forward_dual
from ahdc_lab.seeding import torch_generator
from ahdc_lab.tensorio import write_csv

logger = logging.getLogger("ahdc_lab")

LOSS_COLUMNS = ["step", "o_intra1", "o_intra2", "o_inter", "o_ow", "o_super1", "o_super2", "lambda_intra", "lr"]
THRESHOLD = 0.5


@dataclass
class PairBatch:
    """Matched images ``(x_p1, x_p2)`` and, for labelled batches, their shared mask."""

    x1: torch.Tensor
    x2: torch.Tensor
    y: torch.Tensor | None = None
    ids1: list[str] = field(default_factory=list)
    ids2: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x1.shape[0]

    @classmethod
    def from_pairs(cls, pairs: list[tuple[Sample, Sample]], labelled: bool) -> PairBatch:
        s1 = [p[0] for p in pairs]
        s2 = [p[1] for p in pairs]
        return cls(
            x1=images_to_tensor(s1),
            x2=images_to_tensor(s2),
            y=masks_to_tensor(s1) if labelled else None,
            ids1=[s.id for s in s1],
            ids2=[s.id for s in s2],
        )

    def select(self, index: list[int]) -> PairBatch:
        return PairBatch(
            x1=self.x1[index],
            x2=self.x2[index],
            y=self.y[index] if self.y is not None else None,
            ids1=[self.ids1[i] for i in index],
            ids2=[self.ids2[i] for i in index],
        )

    def rotated(self, angles: torch.Tensor) -> PairBatch:
        """Rotate the pair and its mask by the same per-item angles."""
        return PairBatch(
            x1=rotate_batch(self.x1, angles),
            x2=rotate_batch(self.x2, angles),
            y=rotate_batch(self.y, angles, nearest=True) if self.y is not None else None,
            ids1=self.ids1,
            ids2=self.ids2,
        )


def _concat(a: PairBatch | None, b: PairBatch | None) -> PairBatch | None:
    batches = [x for x in (a, b) if x is not None and len(x)]
    if not batches:
        return None
    if len(batches) == 1:
        return batches[0]
    return PairBatch(
        x1=torch.cat([x.x1 for x in batches]),
        x2=torch.cat([x.x2 for x in batches]),
        ids1=[i for x in batches for i in x.ids1],
        ids2=[i for x in batches for i in x.ids2],
    )


@dataclass
class HdcState:
    """Both dual-modelling networks, their optimisers and the loss history.

    ``s2`` is None in single-network mode.
    """

    s1: ModelBundle
    s2: ModelBundle | None
    opt1: torch.optim.Optimizer | None
    opt2: torch.optim.Optimizer | None
    ramp: RampSchedule
    weights: LossWeights
    domain1: str = ""
    domain2: str = ""
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    pair_lookup: dict[str, str] = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.opt1.param_groups[0]["lr"] if self.opt1 is not None else 0.0

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt1, self.opt2):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr

    @property
    def nets(self) -> list[ModelBundle]:
        return [s for s in (self.s1, self.s2) if s is not None]


def make_hdc_state(
    s1: ModelBundle,
    s2: ModelBundle | None,
    t_max: int,
    weights: LossWeights | None = None,
    lr: float = 1e-3,
    domain1: str = "",
    domain2: str = "",
) -> HdcState:
    """Wrap networks with one Adam optimiser each."""
    return HdcState(
        s1=s1,
        s2=s2,
        opt1=torch.optim.Adam(s1.module.parameters(), lr=lr),
        opt2=torch.optim.Adam(s2.module.parameters(), lr=lr) if s2 is not None else None,
        ramp=RampSchedule(t_max),
        weights=weights or LossWeights(),
        domain1=domain1,
        domain2=domain2,
    )


def _weights(cfg: HdcConfig) -> LossWeights:
    return LossWeights(lambda_super=cfg.lambda_super, lambda_inter=cfg.lambda_inter, lambda_ow=cfg.lambda_ow)


def init_hdc_state(
    cfg: HdcConfig, nets: NetsConfig, seed: int, t_max: int, domain1: str = "", domain2: str = ""
) -> HdcState:
    descriptor = dual_descriptor(nets, use_global_branch=cfg.use_global_branch)
    s1 = build_dual_net(descriptor, seed, "s1")
    s2 = None if cfg.single_net else build_dual_net(descriptor, seed, "s2")
    return make_hdc_state(s1, s2, t_max, _weights(cfg), cfg.lr, domain1, domain2)


# ---------------------------------------------------------------------------
# One iteration
# ---------------------------------------------------------------------------


def _check_pairs(state: HdcState, batch: PairBatch | None) -> None:
    if batch is None or not state.pair_lookup:
        return
    for a, b in zip(batch.ids1, batch.ids2, strict=True):
        if state.pair_lookup.get(a) != b:
            raise ValueError(f"Pairing violation: '{a}' is not matched with '{b}'")


def _update(state: HdcState, loss: torch.Tensor, step: int, ids: list[str], name: str, parts: dict) -> None:
    if not math.isfinite(float(loss)):
        raise DivergenceError("hdc", step, ids, {name: float(loss), **{k: float(v) for k, v in parts.items()}})
    for opt in (state.opt1, state.opt2):
        if opt is not None:
            opt.zero_grad(set_to_none=True)
    loss.backward()
    for opt in (state.opt1, state.opt2):
        if opt is not None:
            opt.step()


def _ow(state: HdcState, pairing: str) -> torch.Tensor:
    return orthogonal_weight_penalty(state.s1.feature_filters(), state.s2.feature_filters(), pairing)


def hdc_iteration(
    state: HdcState,
    labelled: PairBatch | None,
    unlabelled: PairBatch | None,
    cfg: HdcConfig | None = None,
) -> dict[str, float]:
    """Run the three phases once and advance ``state.step`` by one.

    Args:
        state: Mutated in place.
        labelled: Matched labelled pairs with masks (may be None or empty).
        unlabelled: Matched unlabelled pairs (may be None or empty).
        cfg: Phase switches; defaults to :class:`HdcConfig` defaults.

    Returns:
        The recorded history row.

    Raises:
        ValueError: If a batch pairs ids that are not matched.
        DivergenceError: If any loss is not finite.
    """
    cfg = cfg or HdcConfig()
    _check_pairs(state, labelled)
    _check_pairs(state, unlabelled)
    labelled = labelled if labelled is not None and len(labelled) else None
    if labelled is not None and labelled.y is None:
        raise ValueError("Labelled pair batch has no masks")

    step = state.step + 1
    ramp_t = step if cfg.ramp_unit == "iteration" else state.epoch + 1
    lam_intra = state.ramp(ramp_t)
    w = state.weights
    two_nets = state.s2 is not None
    consistency = unlabelled if cfg.consistency_unlabelled_only else _concat(labelled, unlabelled)
    if consistency is not None and not len(consistency):
        consistency = None
    ids = (consistency.ids1 if consistency is not None else []) + (labelled.ids1 if labelled is not None else [])

    parts: dict[str, torch.Tensor | float] = {
        "o_intra1": 0.0,
        "o_intra2": 0.0,
        "o_inter": 0.0,
        "o_ow": 0.0,
        "o_super1": 0.0,
        "o_super2": 0.0,
    }
    run_intra = consistency is not None and not cfg.supervised_only and state.s1.descriptor.use_global_branch
    run_inter = consistency is not None and not cfg.supervised_only and two_nets and w.lambda_inter > 0
    run_super = labelled is not None and w.lambda_super > 0
    use_ow = two_nets and w.lambda_ow > 0

    if cfg.combined_objective:
        if run_intra or run_inter:
            out1 = forward_dual(state.s1, consistency.x1)
            out2 = forward_dual(state.s2, consistency.x2) if two_nets else None
            if run_intra:
                parts["o_intra1"] = intra_consistency(*out1)
                if two_nets:
                    parts["o_intra2"] = intra_consistency(*out2)
            if run_inter:
                parts["o_inter"] = inter_consistency(out1, out2, symmetric=cfg.symmetric_inter)
        if run_super:
            parts["o_super1"] = supervised_loss(forward_dual(state.s1, labelled.x1), labelled.y)
            if two_nets:
                parts["o_super2"] = supervised_loss(forward_dual(state.s2, labelled.x2), labelled.y)
        if use_ow and (run_intra or run_inter):
            parts["o_ow"] = _ow(state, cfg.ow_pairing)
        total = hdc_total(HdcLossParts(**parts), w, ramp_t, state.ramp)
        if isinstance(total, torch.Tensor):
            _update(state, total, step, ids, "total", parts)
    else:
        if run_intra:
            out1 = forward_dual(state.s1, consistency.x1)
            parts["o_intra1"] = intra_consistency(*out1)
            loss = lam_intra * parts["o_intra1"]
            if two_nets:
                out2 = forward_dual(state.s2, consistency.x2)
                parts["o_intra2"] = intra_consistency(*out2)
                loss = loss + lam_intra * parts["o_intra2"]
            if use_ow:
                parts["o_ow"] = _ow(state, cfg.ow_pairing)
                loss = loss + w.lambda_ow * parts["o_ow"]
            _update(state, loss, step, ids, "intra", parts)

        if run_inter:
            out1 = forward_dual(state.s1, consistency.x1)
            out2 = forward_dual(state.s2, consistency.x2)
            parts["o_inter"] = inter_consistency(out1, out2, symmetric=cfg.symmetric_inter)
            loss = w.lambda_inter * parts["o_inter"]
            if use_ow:
                parts["o_ow"] = _ow(state, cfg.ow_pairing)
                loss = loss + w.lambda_ow * parts["o_ow"]
            _update(state, loss, step, ids, "inter", parts)

        if run_super:
            parts["o_super1"] = supervised_loss(forward_dual(state.s1, labelled.x1), labelled.y)
            loss = parts["o_super1"]
            if two_nets:
                parts["o_super2"] = supervised_loss(forward_dual(state.s2, labelled.x2), labelled.y)
                loss = loss + parts["o_super2"]
            _update(state, w.lambda_super * loss, step, ids, "super", parts)

    if two_nets and not isinstance(parts["o_ow"], torch.Tensor):
        with torch.no_grad():
            parts["o_ow"] = _ow(state, cfg.ow_pairing)

    state.step = step
    row = {"step": step, **{k: float(v) for k, v in parts.items()}, "lambda_intra": lam_intra, "lr": state.lr}
    state.history.append(row)
    return row


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def steps_per_epoch(cfg: HdcConfig, n_labelled: int, n_unlabelled: int) -> int:
    """One pass over the unlabelled pairs, or over the labelled pairs when there are none."""
    if n_unlabelled and not cfg.supervised_only:
        return math.ceil(n_unlabelled / cfg.batch_size)
    if n_labelled:
        return math.ceil(n_labelled / cfg.labelled_batch_size)
    return 0


def total_steps(cfg: HdcConfig, m: MatchedDomains) -> int:
    n_l = len(m.pairs(Split.TRAIN_LABELLED))
    n_u = len(m.pairs(Split.TRAIN_UNLABELLED))
    return cfg.epochs * steps_per_epoch(cfg, n_l, n_u)


def resolve_t_max(cfg: HdcConfig, m: MatchedDomains) -> int:
    """Ramp horizon: configured value, else total iterations (or epochs)."""
    if cfg.t_max is not None:
        return cfg.t_max
    if cfg.ramp_unit == "epoch":
        return max(1, cfg.epochs)
    return max(1, total_steps(cfg, m))


def _save(state: HdcState, path: Path) -> Path:
    bundles = {"s1": state.s1}
    optimizers = {"s1": state.opt1}
    if state.s2 is not None:
        bundles["s2"] = state.s2
        optimizers["s2"] = state.opt2
    return save_checkpoint(
        path,
        stage="hdc",
        step=state.step,
        epoch=state.epoch,
        bundles=bundles,
        optimizers=optimizers,
        history=state.history,
        info={"domain1": state.domain1, "domain2": state.domain2, "t_max": state.ramp.t_max},
    )


def load_hdc_state(path: str | Path, cfg: HdcConfig | None = None) -> HdcState:
    """Restore networks, optimisers and history from an HDC checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.stage != "hdc":
        raise ValueError(f"{path} is a '{ckpt.stage}' checkpoint, expected 'hdc'")
    cfg = cfg or HdcConfig()
    s1 = ckpt.bundle("s1")
    s2 = ckpt.bundle("s2") if "s2" in ckpt.descriptors else None
    state = make_hdc_state(
        s1, s2, ckpt.info["t_max"], _weights(cfg), cfg.lr, ckpt.info["domain1"], ckpt.info["domain2"]
    )
    state.opt1.load_state_dict(ckpt.optimizers["s1"])
    if s2 is not None:
        state.opt2.load_state_dict(ckpt.optimizers["s2"])
    state.step, state.epoch, state.history = ckpt.step, ckpt.epoch, list(ckpt.history)
    return state


def train_hdc(
    cfg: HdcConfig,
    nets: NetsConfig,
    m: MatchedDomains,
    out_dir: str | Path,
    seed: int,
    *,
    domain1: str = "",
    domain2: str = "",
    resume_from: str | Path | None = None,
) -> HdcState:
    """Train S1 and S2 on the matched domains.

    Writes ``checkpoints/epoch_XXXX.ckpt``, ``checkpoints/final.ckpt`` and
    ``losses.csv`` under *out_dir*.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    labelled_pairs = m.pairs(Split.TRAIN_LABELLED)
    unlabelled_pairs = m.pairs(Split.TRAIN_UNLABELLED)
    if not labelled_pairs and not unlabelled_pairs:
        raise ValueError("Matched domains contain no training pairs")
    labelled_all = PairBatch.from_pairs(labelled_pairs, labelled=True) if labelled_pairs else None
    unlabelled_all = PairBatch.from_pairs(unlabelled_pairs, labelled=False) if unlabelled_pairs else None

    if resume_from is not None:
        state = load_hdc_state(resume_from, cfg)
        logger.info("Resuming HDC from %s (epoch %d, step %d)", resume_from, state.epoch, state.step)
    else:
        state = init_hdc_state(cfg, nets, seed, resolve_t_max(cfg, m), domain1, domain2)
        _save(state, ckpt_dir / "epoch_0000.ckpt")
    state.pair_lookup = {p.id_p1: p.id_p2 for p in m.pairing}

    n_l, n_u = len(labelled_pairs), len(unlabelled_pairs)
    n_steps = steps_per_epoch(cfg, n_l, n_u)
    with training_progress() as progress:
        for epoch in range(state.epoch, cfg.epochs):
            state.set_lr(cfg.lr * cfg.lr_decay**epoch)
            order_l = epoch_order(n_l, seed, f"hdc:epoch:{epoch}:labelled")
            order_u = epoch_order(n_u, seed, f"hdc:epoch:{epoch}:unlabelled")
            task = progress.add_task(f"HDC epoch {epoch + 1}/{cfg.epochs}", total=n_steps)
            for b in range(n_steps):
                rng = torch_generator(seed, f"hdc:rotate:{state.step + 1}")
                labelled = unlabelled = None
                if labelled_all is not None:
                    index = cycled(order_l, b * cfg.labelled_batch_size, cfg.labelled_batch_size)
                    labelled = labelled_all.select(index)
                    labelled = labelled.rotated(random_angles(len(labelled), cfg.rotation_degrees, rng))
                if unlabelled_all is not None and not cfg.supervised_only:
                    count = min(cfg.batch_size, n_u - b * cfg.batch_size)
                    unlabelled = unlabelled_all.select(cycled(order_u, b * cfg.batch_size, count))
                    unlabelled = unlabelled.rotated(random_angles(len(unlabelled), cfg.rotation_degrees, rng))
                hdc_iteration(state, labelled, unlabelled, cfg)
                progress.advance(task)
            progress.remove_task(task)
            state.epoch = epoch + 1

            rows = state.history[-n_steps:] if n_steps else []
            if rows:
                logger.info(
                    "HDC epoch %d/%d: intra=%.4f inter=%.4f ow=%.4f super=%.4f lambda_intra=%.4f lr=%.6g",
                    state.epoch,
                    cfg.epochs,
                    float(np.mean([r["o_intra1"] + r["o_intra2"] for r in rows])),
                    float(np.mean([r["o_inter"] for r in rows])),
                    float(np.mean([r["o_ow"] for r in rows])),
                    float(np.mean([r["o_super1"] + r["o_super2"] for r in rows])),
                    rows[-1]["lambda_intra"],
                    state.lr,
                )
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                _save(state, ckpt_dir / f"epoch_{state.epoch:04d}.ckpt")

    state.set_lr(cfg.lr * cfg.lr_decay**state.epoch)
    _save(state, ckpt_dir / "final.ckpt")
    write_csv(out_dir / "losses.csv", LOSS_COLUMNS, state.history)
    return state


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def select_net(state: HdcState, which: str, domain: str | None = None) -> ModelBundle:
    """Pick the network for *which*; ``auto`` maps the first domain to S1 and the second to S2."""
    if which not in WHICH_CHOICES:
        raise ValueError(f"which must be one of {WHICH_CHOICES}, got {which!r}")
    if which == "s1":
        return state.s1
    if which == "s2":
        if state.s2 is None:
            raise ValueError("No second network in single-network mode")
        return state.s2
    if domain == state.domain1:
        return state.s1
    if domain == state.domain2:
        return state.s2 if state.s2 is not None else state.s1
    raise ValueError(f"Unknown domain tag {domain!r} for which=auto (known: {state.domain1!r}, {state.domain2!r})")


def predict(
    state: HdcState, x: TensorImage, which: str = "auto", domain: str | None = None
) -> tuple[TensorImage, LabelMask]:
    """Local-branch probability map and its ``p >= 0.5`` mask."""
    net = select_net(state, which, domain)
    batch = images_to_tensor([Sample(id="x", image=x, mask=None, domain=domain or "", split=Split.TEST)])
    with torch.no_grad():
        local = forward_dual(net, batch).local[0, 0].cpu().numpy()
    return TensorImage(local, spacing=x.spacing), LabelMask(local >= THRESHOLD, spacing=x.spacing)
