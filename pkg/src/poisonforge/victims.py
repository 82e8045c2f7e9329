"""Victim learners: supervised training, contrastive pretraining, linear probes.

A victim consumes a training data source (clean Dataset or PoisonedDatasetView,
anything with .labels / .class_count / .batch(idx)) and reports test accuracy.
Contrastive victims pretrain a backbone with InfoNCE (simclr) or supervised
contrastive loss (supcl), then fit a linear probe on frozen pre-projection
features; probe features are extracted once without augmentation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .data import AugmentConfig, augment_batch, two_views
from .errors import ConfigError
from .losses import cross_entropy_logits, info_nce, sup_con_loss
from .models import DualHeadModel, MomentumSGD, build_model
from .seeding import make_generator

LEARNERS = ("sl", "simclr", "supcl")


@dataclass
class VictimConfig:
    learner: str = "sl"
    epochs: int = 100               # supervised victim epochs
    pretrain_epochs: int = 1000     # contrastive pretraining epochs
    probe_epochs: int = 100
    lr_sl: float = 0.1
    sl_milestones: tuple[float, ...] = (0.6, 0.75, 0.9)
    sl_gamma: float = 0.1
    weight_decay_sl: float = 5e-4
    lr_pretrain: float = 0.5
    weight_decay_pretrain: float = 1e-4
    lr_probe: float = 1.0
    probe_gamma: float = 0.2
    weight_decay_probe: float = 0.0
    momentum: float = 0.9
    temperature: float = 0.5
    batch_size: int = 128           # supervised training and probes
    batch_size_pretrain: int = 256
    scale_factor: float = 1.0       # scales all epoch counts for small runs
    seed: int = 0
    arch: str = "resnet18_like"
    embed_dim: int = 128
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sl_augment: bool = False        # crop/flip augmentation for the supervised victim

    def validate(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}, expected one of {LEARNERS}")
        for name in ("epochs", "pretrain_epochs", "probe_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_sl", "lr_pretrain", "lr_probe", "temperature", "scale_factor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in (
            "momentum",
            "weight_decay_sl",
            "weight_decay_pretrain",
            "weight_decay_probe",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.batch_size < 2 or self.batch_size_pretrain < 2:
            raise ConfigError("batch sizes must be >= 2")
        self.augment.validate()
        return self

    def _scaled(self, epochs: int) -> int:
        return max(1, int(round(epochs * self.scale_factor)))

    @property
    def sl_epochs(self) -> int:
        return self._scaled(self.epochs)

    @property
    def cl_epochs(self) -> int:
        return self._scaled(self.pretrain_epochs)

    @property
    def lp_epochs(self) -> int:
        return self._scaled(self.probe_epochs)


def step_lr(base: float, epoch: int, total: int, milestones=(0.6, 0.75, 0.9), gamma: float = 0.1) -> float:
    """Piecewise-constant decay: multiply by gamma at floor(f * total) for each
    fraction f. Epochs are 0-indexed."""
    drops = sum(1 for f in milestones if epoch >= int(math.floor(f * total)))
    return base * (gamma ** drops)


def cosine_lr(base: float, epoch: int, total: int) -> float:
    """Half-cosine from base at epoch 0 toward 0 at epoch `total`."""
    return base * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


@dataclass
class TrainCurve:
    rows: list[tuple[int, float, float]]  # (epoch, train_acc, test_acc), percent

    @property
    def final_train_acc(self) -> float:
        return self.rows[-1][1]

    @property
    def final_test_acc(self) -> float:
        return self.rows[-1][2]

    def save_csv(self, path):
        lines = ["epoch,train_acc,test_acc"]
        for epoch, train_acc, test_acc in self.rows:
            lines.append(f"{epoch},{train_acc!r},{test_acc!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_csv(cls, path) -> "TrainCurve":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "epoch,train_acc,test_acc":
            raise ValueError(f"not a training curve file: {path}")
        rows = []
        for line in lines[1:]:
            if not line.strip():
                continue
            e, tr, te = line.split(",")
            rows.append((int(e), float(tr), float(te)))
        return cls(rows)


def _epoch_batches(n: int, batch_size: int, gen: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def evaluate_accuracy(model: DualHeadModel, data, batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        logits = model.logits(data.batch(idx))
        correct += (logits.argmax(dim=1) == data.labels[idx]).sum().item()
    return 100.0 * correct / len(data)


def train_sl(train_data, test_data, cfg: VictimConfig) -> tuple[DualHeadModel, TrainCurve]:
    cfg.validate()
    init_gen = make_generator(cfg.seed, "victim-init", "sl")
    order_gen = make_generator(cfg.seed, "victim-order", "sl")
    aug_gen = make_generator(cfg.seed, "victim-augment", "sl")
    model = build_model(
        cfg.arch, train_data.class_count, cfg.embed_dim, init_gen,
        in_channels=train_data.image_shape[0],
    )
    opt = MomentumSGD(model.sup_parameters(), cfg.lr_sl, cfg.momentum, cfg.weight_decay_sl)
    total = cfg.sl_epochs
    # flips and crops only; color jitter is a contrastive-view transform
    sl_aug = AugmentConfig(
        crop_scale=cfg.augment.crop_scale,
        crop_ratio=cfg.augment.crop_ratio,
        flip_prob=cfg.augment.flip_prob,
        jitter_prob=0.0,
        grayscale_prob=0.0,
    )
    rows = []
    for epoch in range(total):
        opt.lr = step_lr(cfg.lr_sl, epoch, total, cfg.sl_milestones, cfg.sl_gamma)
        model.train()
        correct = 0
        seen = 0
        for idx in _epoch_batches(len(train_data), cfg.batch_size, order_gen):
            xb = train_data.batch(idx)
            if cfg.sl_augment:
                xb = augment_batch(xb, sl_aug, aug_gen)
            yb = train_data.labels[idx]
            logits = model.logits(xb)
            loss = cross_entropy_logits(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += (logits.argmax(dim=1) == yb).sum().item()
            seen += idx.numel()
        train_acc = 100.0 * correct / seen
        test_acc = evaluate_accuracy(model, test_data)
        rows.append((epoch, train_acc, test_acc))
    return model, TrainCurve(rows)


def pretrain_contrastive(
    train_data, cfg: VictimConfig, objective: str = "infonce"
) -> tuple[DualHeadModel, list[float]]:
    """SimCLR-style pretraining (objective="infonce") or supervised contrastive
    pretraining (objective="supcon"). Returns the model and per-epoch mean loss."""
    cfg.validate()
    if objective not in ("infonce", "supcon"):
        raise ConfigError(f"unknown pretraining objective {objective!r}")
    init_gen = make_generator(cfg.seed, "victim-init", objective)
    order_gen = make_generator(cfg.seed, "victim-order", objective)
    aug_gen = make_generator(cfg.seed, "victim-augment", objective)
    model = build_model(
        cfg.arch, train_data.class_count, cfg.embed_dim, init_gen,
        in_channels=train_data.image_shape[0],
    )
    opt = MomentumSGD(
        model.cl_parameters(), cfg.lr_pretrain, cfg.momentum, cfg.weight_decay_pretrain
    )
    total = cfg.cl_epochs
    epoch_losses = []
    for epoch in range(total):
        opt.lr = cosine_lr(cfg.lr_pretrain, epoch, total)
        model.train()
        running, batches = 0.0, 0
        for idx in _epoch_batches(len(train_data), cfg.batch_size_pretrain, order_gen):
            if idx.numel() < 2:
                continue  # a singleton batch has no negatives
            xb = train_data.batch(idx)
            va, vb = two_views(xb, cfg.augment, aug_gen)
            za, zb = model.embed(va), model.embed(vb)
            if objective == "infonce":
                loss = info_nce(za, zb, cfg.temperature)
            else:
                yb = train_data.labels[idx]
                loss = sup_con_loss(
                    torch.cat([za, zb], dim=0), torch.cat([yb, yb], dim=0), cfg.temperature
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item()
            batches += 1
        epoch_losses.append(running / max(batches, 1))
    return model, epoch_losses


@torch.no_grad()
def extract_features(model: DualHeadModel, data, batch_size: int = 256) -> torch.Tensor:
    """Pre-projection backbone features, no augmentation, eval mode."""
    model.eval()
    chunks = []
    for start in range(0, len(data), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(data)))
        chunks.append(model.features(data.batch(idx)))
    return torch.cat(chunks, dim=0)


def linear_probe(
    model: DualHeadModel, train_data, test_data, cfg: VictimConfig
) -> tuple[nn.Linear, TrainCurve]:
    """Fit a linear classifier on frozen backbone features."""
    cfg.validate()
    feats_train = extract_features(model, train_data)
    feats_test = extract_features(model, test_data)
    y_train, y_test = train_data.labels, test_data.labels
    init_gen = make_generator(cfg.seed, "probe-init")
    order_gen = make_generator(cfg.seed, "probe-order")
    probe = nn.Linear(feats_train.shape[1], train_data.class_count)
    bound = 1.0 / math.sqrt(feats_train.shape[1])
    with torch.no_grad():
        probe.weight.uniform_(-bound, bound, generator=init_gen)
        probe.bias.uniform_(-bound, bound, generator=init_gen)
    opt = MomentumSGD(probe.parameters(), cfg.lr_probe, cfg.momentum, cfg.weight_decay_probe)
    total = cfg.lp_epochs
    rows = []
    for epoch in range(total):
        opt.lr = step_lr(cfg.lr_probe, epoch, total, cfg.sl_milestones, cfg.probe_gamma)
        correct, seen = 0, 0
        for idx in _epoch_batches(feats_train.shape[0], cfg.batch_size, order_gen):
            logits = probe(feats_train[idx])
            loss = cross_entropy_logits(logits, y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            correct += (logits.argmax(dim=1) == y_train[idx]).sum().item()
            seen += idx.numel()
        with torch.no_grad():
            test_acc = 100.0 * (probe(feats_test).argmax(dim=1) == y_test).sum().item() / len(y_test)
        rows.append((epoch, 100.0 * correct / seen, test_acc))
    return probe, TrainCurve(rows)


@dataclass
class VictimRun:
    learner: str
    model: DualHeadModel
    probe: nn.Linear | None
    curve: TrainCurve
    pretrain_losses: list[float] | None

    @property
    def final_test_acc(self) -> float:
        return self.curve.final_test_acc


def train_victim(learner: str, train_data, test_data, cfg: VictimConfig) -> VictimRun:
    if learner == "sl":
        model, curve = train_sl(train_data, test_data, cfg)
        return VictimRun("sl", model, None, curve, None)
    if learner in ("simclr", "supcl"):
        objective = "infonce" if learner == "simclr" else "supcon"
        model, losses = pretrain_contrastive(train_data, cfg, objective)
        probe, curve = linear_probe(model, train_data, test_data, cfg)
        return VictimRun(learner, model, probe, curve, losses)
    raise ConfigError(f"unknown learner {learner!r}, expected one of {LEARNERS}")
