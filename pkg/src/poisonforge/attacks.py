"""Poison generation.

The core loop alternates, per epoch, four phases of M batches each:

  1. cl_model: update backbone + projection head on the contrastive loss of
     two augmented views of the perturbed images;
  2. cl_pgd:   S_cl projected sign steps on delta minimizing that same loss;
  3. sl_model: update backbone + classification head on cross-entropy of the
     perturbed images;
  4. sl_pgd:   S_sl projected sign steps on delta minimizing cross-entropy.

Crafting against both paradigms with one shared backbone is what makes the
perturbations transfer: either kind of victim finds the error-minimizing
shortcut. Ablation variants keep only the supervised phases (em), only the
contrastive phases (cp_*), or use a frozen pretrained model (tap). Composition
variants sum two single-paradigm perturbation sets (hf, cc).

Models run in train() during model phases and eval() during PGD phases, so
the PGD objective is deterministic in delta and BatchNorm statistics are not
polluted by inner-loop passes. Within one PGD batch visit the two augmented
views are drawn once and held fixed across the S steps.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import torch

from .data import AugmentConfig, Dataset, apply_augment, draw_augment_params
from .errors import ConfigError, NumericError
from .losses import (
    ContrastiveLossConfig,
    combined_cl_loss,
    cross_entropy_logits,
    info_nce,
)
from .models import DualHeadModel, MomentumSGD, build_model
from .perturb import PerturbationSet, pgd_update
from .seeding import make_generator, substream_seed

log = logging.getLogger(__name__)

VARIANTS = (
    "tp",
    "em",
    "cp_infonce",
    "cp_au",
    "tap",
    "hf",
    "cc",
    "tp_two_models",
    "tp_tap_based",
)

PHASE_CL_MODEL = "cl_model"
PHASE_CL_PGD = "cl_pgd"
PHASE_SL_MODEL = "sl_model"
PHASE_SL_PGD = "sl_pgd"


@dataclass
class AttackConfig:
    variant: str = "tp"
    epsilon: float = 8.0 / 255.0
    epochs: int = 300
    batch_size: int = 128
    batches_per_phase: int | None = None  # None: one full pass, ceil(n / batch_size)
    pgd_steps_sl: int = 5
    pgd_steps_cl: int = 5
    pgd_alpha_sl: float = 0.1  # step size as fraction of epsilon
    pgd_alpha_cl: float = 0.1
    lr_sl: float = 0.1
    lr_cl: float = 0.5
    momentum: float = 0.9
    weight_decay_sl: float = 5e-4
    weight_decay_cl: float = 1e-4
    loss: ContrastiveLossConfig = field(default_factory=ContrastiveLossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    arch: str = "resnet18_like"
    embed_dim: int = 128
    seed: int = 0
    share_backbone: bool = True
    delta_init: str = "zeros"  # or "uniform"
    delta_after_augment: bool = False
    sl_phase_first: bool = False
    tap_pretrain_epochs: int = 20

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attack variant {self.variant!r}, expected one of {VARIANTS}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.batches_per_phase is not None and self.batches_per_phase < 1:
            raise ConfigError(f"batches_per_phase must be >= 1, got {self.batches_per_phase}")
        for name in ("pgd_steps_sl", "pgd_steps_cl"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("pgd_alpha_sl", "pgd_alpha_cl", "lr_sl", "lr_cl"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay_sl", "weight_decay_cl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.delta_init not in ("zeros", "uniform"):
            raise ConfigError(f"delta_init must be zeros or uniform, got {self.delta_init!r}")
        if self.tap_pretrain_epochs < 0:
            raise ConfigError(f"tap_pretrain_epochs must be >= 0, got {self.tap_pretrain_epochs}")
        self.loss.validate()
        self.augment.validate()
        return self

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class PhaseEvent:
    kind: str      # cl_model | cl_pgd | sl_model | sl_pgd
    epoch: int
    batch: int
    updates: int   # model steps or PGD steps taken on this batch
    loss_start: float
    loss_end: float


@dataclass
class AttackResult:
    poison: PerturbationSet
    model: DualHeadModel | None
    events: list[PhaseEvent]
    aux_models: dict = field(default_factory=dict)


class _AttackLoop:
    def __init__(self, dataset: Dataset, cfg: AttackConfig, observer=None):
        cfg.validate()
        self.cfg = cfg
        self.x = dataset.images
        self.y = dataset.labels
        self.n = len(dataset)
        self.dataset = dataset
        self.observer = observer
        self.events: list[PhaseEvent] = []
        self.order_gen = make_generator(cfg.seed, "order")
        self.aug_gen = make_generator(cfg.seed, "augment")
        if cfg.delta_init == "uniform" and cfg.epsilon > 0:
            init_gen = make_generator(cfg.seed, "delta-init")
            self.deltas = (
                torch.rand(self.x.shape, generator=init_gen) * 2.0 - 1.0
            ) * cfg.epsilon
        else:
            self.deltas = torch.zeros_like(self.x)
        self.alpha_sl = cfg.pgd_alpha_sl * cfg.epsilon
        self.alpha_cl = cfg.pgd_alpha_cl * cfg.epsilon

    def batches(self) -> list[torch.Tensor]:
        perm = torch.randperm(self.n, generator=self.order_gen)
        full = math.ceil(self.n / self.cfg.batch_size)
        m = min(self.cfg.batches_per_phase or full, full)
        bsz = self.cfg.batch_size
        return [perm[i * bsz : (i + 1) * bsz] for i in range(m)]

    def emit(self, event: PhaseEvent):
        self.events.append(event)
        if self.observer is not None:
            self.observer(event)

    def _check_finite(self, loss: torch.Tensor, epoch: int, kind: str, batch: int):
        if not torch.isfinite(loss):
            raise NumericError(
                f"non-finite loss ({loss.item()!r}) at epoch {epoch} phase {kind} batch {batch}"
            )

    def _two_views(self, idx: torch.Tensor, delta: torch.Tensor, params_pair):
        """Perturb-then-augment by default; delta_after_augment adds the raw
        delta to each augmented view instead."""
        xb = self.x[idx]
        pa, pb = params_pair
        if self.cfg.delta_after_augment:
            return apply_augment(xb, pa) + delta, apply_augment(xb, pb) + delta
        return apply_augment(xb + delta, pa), apply_augment(xb + delta, pb)

    def _draw_view_params(self, count: int):
        hw = self.x.shape[2:]
        pa = draw_augment_params(count, hw, self.cfg.augment, self.aug_gen)
        pb = draw_augment_params(count, hw, self.cfg.augment, self.aug_gen)
        return pa, pb

    # -- model-update phases --------------------------------------------

    def cl_model_phase(self, model: DualHeadModel, opt: MomentumSGD, epoch: int, loss_fn):
        model.train()
        for bi, idx in enumerate(self.batches()):
            params_pair = self._draw_view_params(idx.numel())
            va, vb = self._two_views(idx, self.deltas[idx], params_pair)
            loss = loss_fn(model.embed(va), model.embed(vb))
            self._check_finite(loss, epoch, PHASE_CL_MODEL, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            self.emit(PhaseEvent(PHASE_CL_MODEL, epoch, bi, 1, val, val))

    def sl_model_phase(self, model: DualHeadModel, opt: MomentumSGD, epoch: int, clean: bool = False):
        model.train()
        for bi, idx in enumerate(self.batches()):
            xb = self.x[idx] if clean else self.x[idx] + self.deltas[idx]
            loss = cross_entropy_logits(model.logits(xb), self.y[idx])
            self._check_finite(loss, epoch, PHASE_SL_MODEL, bi)
            opt.zero_grad()
            loss.backward()
            opt.step()
            val = loss.item()
            self.emit(PhaseEvent(PHASE_SL_MODEL, epoch, bi, 1, val, val))

    # -- PGD phases ------------------------------------------------------

    def cl_pgd_phase(self, model: DualHeadModel, epoch: int, loss_fn):
        model.eval()
        steps = self.cfg.pgd_steps_cl
        for bi, idx in enumerate(self.batches()):
            params_pair = self._draw_view_params(idx.numel())
            d = self.deltas[idx]
            loss_start = None
            for _ in range(steps):
                d = d.detach().requires_grad_(True)
                va, vb = self._two_views(idx, d, params_pair)
                loss = loss_fn(model.embed(va), model.embed(vb))
                self._check_finite(loss, epoch, PHASE_CL_PGD, bi)
                if loss_start is None:
                    loss_start = loss.item()
                (grad,) = torch.autograd.grad(loss, d)
                d = pgd_update(d.detach(), grad, self.alpha_cl, self.cfg.epsilon)
            with torch.no_grad():
                va, vb = self._two_views(idx, d, params_pair)
                loss_end = loss_fn(model.embed(va), model.embed(vb)).item()
            self.deltas[idx] = d
            self.emit(PhaseEvent(PHASE_CL_PGD, epoch, bi, steps, loss_start, loss_end))

    def sl_pgd_phase(self, model: DualHeadModel, epoch: int, targets: torch.Tensor | None = None):
        model.eval()
        steps = self.cfg.pgd_steps_sl
        labels = self.y if targets is None else targets
        for bi, idx in enumerate(self.batches()):
            yb = labels[idx]
            d = self.deltas[idx]
            loss_start = None
            for _ in range(steps):
                d = d.detach().requires_grad_(True)
                loss = cross_entropy_logits(model.logits(self.x[idx] + d), yb)
                self._check_finite(loss, epoch, PHASE_SL_PGD, bi)
                if loss_start is None:
                    loss_start = loss.item()
                (grad,) = torch.autograd.grad(loss, d)
                d = pgd_update(d.detach(), grad, self.alpha_sl, self.cfg.epsilon)
            with torch.no_grad():
                loss_end = cross_entropy_logits(model.logits(self.x[idx] + d), yb).item()
            self.deltas[idx] = d
            self.emit(PhaseEvent(PHASE_SL_PGD, epoch, bi, steps, loss_start, loss_end))

    # -- result ----------------------------------------------------------

    def finish(self, attack: str) -> PerturbationSet:
        return PerturbationSet(
            deltas=self.deltas.detach().clone(),
            epsilon=self.cfg.epsilon,
            dataset_fingerprint=self.dataset.fingerprint(),
            attack=attack,
            seed=self.cfg.seed,
            config_digest=self.cfg.digest(),
        )


def _cl_loss_fn(cfg: AttackConfig):
    if cfg.variant == "cp_infonce":
        tau = cfg.loss.temperature
        return lambda za, zb: info_nce(za, zb, tau)
    loss_cfg = cfg.loss
    return lambda za, zb: combined_cl_loss(za, zb, loss_cfg)


def _build(cfg: AttackConfig, dataset: Dataset, *names) -> DualHeadModel:
    gen = make_generator(cfg.seed, "init", *names)
    return build_model(
        cfg.arch,
        dataset.class_count,
        cfg.embed_dim,
        gen,
        in_channels=dataset.image_shape[0],
    )


def run_transferable_poisoning(dataset: Dataset, cfg: AttackConfig, observer=None) -> AttackResult:
    """Full four-phase loop; one shared backbone unless share_backbone=False,
    in which case the contrastive and supervised phases get disjoint models."""
    loop = _AttackLoop(dataset, cfg, observer)
    loss_fn = _cl_loss_fn(cfg)
    if cfg.share_backbone:
        model_cl = model_sl = _build(cfg, dataset)
    else:
        model_cl = _build(cfg, dataset, "cl")
        model_sl = _build(cfg, dataset, "sl")
    opt_cl = MomentumSGD(model_cl.cl_parameters(), cfg.lr_cl, cfg.momentum, cfg.weight_decay_cl)
    opt_sl = MomentumSGD(model_sl.sup_parameters(), cfg.lr_sl, cfg.momentum, cfg.weight_decay_sl)
    for epoch in range(cfg.epochs):
        cl_phases = (
            lambda: loop.cl_model_phase(model_cl, opt_cl, epoch, loss_fn),
            lambda: loop.cl_pgd_phase(model_cl, epoch, loss_fn),
        )
        sl_phases = (
            lambda: loop.sl_model_phase(model_sl, opt_sl, epoch),
            lambda: loop.sl_pgd_phase(model_sl, epoch),
        )
        ordered = sl_phases + cl_phases if cfg.sl_phase_first else cl_phases + sl_phases
        for phase in ordered:
            phase()
        log.info("epoch %d/%d done (%s)", epoch + 1, cfg.epochs, cfg.variant)
    aux = {} if cfg.share_backbone else {"model_sl": model_sl}
    return AttackResult(loop.finish(cfg.variant), model_cl, loop.events, aux)


def run_error_minimizing(dataset: Dataset, cfg: AttackConfig, observer=None) -> AttackResult:
    """Supervised-only ablation: alternate sl_model and sl_pgd phases."""
    loop = _AttackLoop(dataset, cfg, observer)
    model = _build(cfg, dataset)
    opt = MomentumSGD(model.sup_parameters(), cfg.lr_sl, cfg.momentum, cfg.weight_decay_sl)
    for epoch in range(cfg.epochs):
        loop.sl_model_phase(model, opt, epoch)
        loop.sl_pgd_phase(model, epoch)
        log.info("epoch %d/%d done (em)", epoch + 1, cfg.epochs)
    return AttackResult(loop.finish("em"), model, loop.events)


def run_contrastive_poisoning(dataset: Dataset, cfg: AttackConfig, observer=None) -> AttackResult:
    """Contrastive-only ablation; the loss is InfoNCE (cp_infonce) or the
    alignment+uniformity combination (cp_au)."""
    loop = _AttackLoop(dataset, cfg, observer)
    model = _build(cfg, dataset)
    loss_fn = _cl_loss_fn(cfg)
    opt = MomentumSGD(model.cl_parameters(), cfg.lr_cl, cfg.momentum, cfg.weight_decay_cl)
    for epoch in range(cfg.epochs):
        loop.cl_model_phase(model, opt, epoch, loss_fn)
        loop.cl_pgd_phase(model, epoch, loss_fn)
        log.info("epoch %d/%d done (%s)", epoch + 1, cfg.epochs, cfg.variant)
    return AttackResult(loop.finish(cfg.variant), model, loop.events)


def _pretrain_clean_reference(loop: _AttackLoop, cfg: AttackConfig, dataset: Dataset) -> DualHeadModel:
    model = _build(cfg, dataset)
    opt = MomentumSGD(model.sup_parameters(), cfg.lr_sl, cfg.momentum, cfg.weight_decay_sl)
    for epoch in range(cfg.tap_pretrain_epochs):
        loop.sl_model_phase(model, opt, epoch, clean=True)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def run_targeted_adversarial(dataset: Dataset, cfg: AttackConfig, observer=None) -> AttackResult:
    """Two-stage attack: train a clean reference classifier, freeze it, then
    run targeted PGD pushing every sample toward label (y + 1) mod C."""
    loop = _AttackLoop(dataset, cfg, observer)
    model = _pretrain_clean_reference(loop, cfg, dataset)
    targets = (dataset.labels + 1) % dataset.class_count
    for epoch in range(cfg.epochs):
        loop.sl_pgd_phase(model, epoch, targets=targets)
        log.info("epoch %d/%d done (tap)", epoch + 1, cfg.epochs)
    return AttackResult(loop.finish("tap"), model, loop.events)


def run_tp_tap_based(dataset: Dataset, cfg: AttackConfig, observer=None) -> AttackResult:
    """Hybrid: contrastive phases train their own model while the supervised
    PGD phase uses a frozen clean-pretrained classifier with targeted labels."""
    loop = _AttackLoop(dataset, cfg, observer)
    frozen = _pretrain_clean_reference(loop, cfg, dataset)
    model_cl = _build(cfg, dataset, "cl")
    loss_fn = _cl_loss_fn(cfg)
    opt_cl = MomentumSGD(model_cl.cl_parameters(), cfg.lr_cl, cfg.momentum, cfg.weight_decay_cl)
    targets = (dataset.labels + 1) % dataset.class_count
    for epoch in range(cfg.epochs):
        loop.cl_model_phase(model_cl, opt_cl, epoch, loss_fn)
        loop.cl_pgd_phase(model_cl, epoch, loss_fn)
        loop.sl_pgd_phase(frozen, epoch, targets=targets)
        log.info("epoch %d/%d done (tp_tap_based)", epoch + 1, cfg.epochs)
    return AttackResult(loop.finish("tp_tap_based"), model_cl, loop.events, {"frozen_sl": frozen})


def compose_hf(p1: PerturbationSet, p2: PerturbationSet, attack: str = "hf") -> PerturbationSet:
    """Half-budget sum: each input honors its own budget; the output budget is
    the sum of the two. Float32 addition cannot overshoot because rounding is
    monotone and the exact sum is within budget."""
    if p1.dataset_fingerprint != p2.dataset_fingerprint:
        raise ConfigError("cannot compose perturbations generated for different datasets")
    p1.check_budget()
    p2.check_budget()
    return PerturbationSet(
        deltas=p1.deltas + p2.deltas,
        epsilon=p1.epsilon + p2.epsilon,
        dataset_fingerprint=p1.dataset_fingerprint,
        attack=attack,
        seed=p1.seed,
        config_digest=p1.config_digest,
    )


def compose_cc(p1: PerturbationSet, p2: PerturbationSet, attack: str = "cc") -> PerturbationSet:
    """Clamped sum at the shared budget: add full-budget perturbations, then
    project back onto the epsilon ball."""
    if p1.dataset_fingerprint != p2.dataset_fingerprint:
        raise ConfigError("cannot compose perturbations generated for different datasets")
    if p1.epsilon != p2.epsilon:
        raise ConfigError(
            f"clamped composition needs equal budgets, got {p1.epsilon} and {p2.epsilon}"
        )
    p1.check_budget()
    p2.check_budget()
    summed = (p1.deltas + p2.deltas).clamp(-p1.epsilon, p1.epsilon)
    return PerturbationSet(
        deltas=summed,
        epsilon=p1.epsilon,
        dataset_fingerprint=p1.dataset_fingerprint,
        attack=attack,
        seed=p1.seed,
        config_digest=p1.config_digest,
    )


def _composition_parts(dataset: Dataset, cfg: AttackConfig, observer, half_budget: bool):
    eps = cfg.epsilon / 2.0 if half_budget else cfg.epsilon
    em_cfg = replace(
        cfg, variant="em", epsilon=eps, seed=substream_seed(cfg.seed, "compose-em") % (2**31)
    )
    cp_cfg = replace(
        cfg, variant="cp_au", epsilon=eps, seed=substream_seed(cfg.seed, "compose-cp") % (2**31)
    )
    em_res = run_error_minimizing(dataset, em_cfg, observer)
    cp_res = run_contrastive_poisoning(dataset, cp_cfg, observer)
    return em_res, cp_res


def run_attack(dataset: Dataset, cfg: AttackConfig, observer=None) -> AttackResult:
    cfg.validate()
    if cfg.variant in ("tp", "tp_two_models"):
        if cfg.variant == "tp_two_models":
            cfg = replace(cfg, share_backbone=False)
        return run_transferable_poisoning(dataset, cfg, observer)
    if cfg.variant == "em":
        return run_error_minimizing(dataset, cfg, observer)
    if cfg.variant in ("cp_infonce", "cp_au"):
        return run_contrastive_poisoning(dataset, cfg, observer)
    if cfg.variant == "tap":
        return run_targeted_adversarial(dataset, cfg, observer)
    if cfg.variant == "tp_tap_based":
        return run_tp_tap_based(dataset, cfg, observer)
    if cfg.variant == "hf":
        em_res, cp_res = _composition_parts(dataset, cfg, observer, half_budget=True)
        poison = compose_hf(em_res.poison, cp_res.poison)
        poison.seed = cfg.seed
        poison.config_digest = cfg.digest()
        events = em_res.events + cp_res.events
        return AttackResult(poison, None, events, {"em": em_res.model, "cp": cp_res.model})
    if cfg.variant == "cc":
        em_res, cp_res = _composition_parts(dataset, cfg, observer, half_budget=False)
        poison = compose_cc(em_res.poison, cp_res.poison)
        poison.seed = cfg.seed
        poison.config_digest = cfg.digest()
        events = em_res.events + cp_res.events
        return AttackResult(poison, None, events, {"em": em_res.model, "cp": cp_res.model})
    raise ConfigError(f"unknown attack variant {cfg.variant!r}")
