"""Worst-case unlearnability reporting and hyperparameter sweeps.

A poisoning run is only as good as its weakest transfer target, so the
headline metric for an attack is the maximum test accuracy over the victim
learners that trained on the poisoned data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from .attacks import AttackConfig, run_attack
from .data import Dataset, apply_poison, subset
from .errors import ConfigError
from .perturb import PerturbationSet
from .seeding import make_generator
from .victims import VictimConfig, train_victim

log = logging.getLogger(__name__)

SWEEP_AXES = ("lambda_weight", "pgd_ratio", "epochs", "budget", "poison_ratio")


def worst_case(accuracies) -> float:
    """Max accuracy over victim learners; empty input is an error."""
    values = list(accuracies.values()) if hasattr(accuracies, "values") else list(accuracies)
    if not values:
        raise ValueError("worst_case needs at least one learner accuracy")
    return max(values)


@dataclass
class ReportRow:
    attack: str
    learner: str
    accuracy: float
    seed: int
    dataset: str
    epsilon: float


CSV_HEADER = "attack,learner,accuracy,seed,dataset,epsilon"


@dataclass
class UnlearnabilityReport:
    rows: list[ReportRow]

    def attacks(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.attack not in seen:
                seen.append(r.attack)
        return seen

    def learners(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.learner not in seen:
                seen.append(r.learner)
        return seen

    def learner_means(self, attack: str) -> dict[str, float]:
        """Mean accuracy per learner over seeds, for one attack."""
        sums: dict[str, list[float]] = {}
        for r in self.rows:
            if r.attack == attack:
                sums.setdefault(r.learner, []).append(r.accuracy)
        if not sums:
            raise KeyError(f"no rows for attack {attack!r}")
        return {k: sum(v) / len(v) for k, v in sums.items()}

    def worst(self, attack: str) -> float:
        return worst_case(self.learner_means(attack))

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for r in sorted(self.rows, key=lambda r: (r.attack, r.learner, r.seed)):
            lines.append(
                f"{r.attack},{r.learner},{r.accuracy!r},{r.seed},{r.dataset},{r.epsilon!r}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "UnlearnabilityReport":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError("not an unlearnability report CSV")
        rows = []
        for ln in lines[1:]:
            attack, learner, acc, seed, dataset, eps = ln.split(",")
            rows.append(ReportRow(attack, learner, float(acc), int(seed), dataset, float(eps)))
        return cls(rows)

    def to_text(self) -> str:
        """Aligned table: one attack per row, learner columns, worst column.

        The worst column is recomputed here from the rows; cells are means
        over seeds."""
        learners = self.learners()
        header = ["attack"] + learners + ["worst"]
        table = [header]
        for attack in self.attacks():
            means = self.learner_means(attack)
            cells = [attack]
            cells += [f"{means[l]:.2f}" if l in means else "-" for l in learners]
            cells.append(f"{worst_case(means):.2f}")
            table.append(cells)
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        out = []
        for row in table:
            out.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        return "\n".join(out) + "\n"


def render_report(report: UnlearnabilityReport, csv_path, txt_path=None) -> Path:
    csv_path = Path(csv_path)
    csv_path.write_text(report.to_csv())
    if txt_path is not None:
        Path(txt_path).write_text(report.to_text())
    return csv_path


def run_victim_suite(train_data, test_data, learners, cfg: VictimConfig) -> dict[str, float]:
    out = {}
    for learner in learners:
        run = train_victim(learner, train_data, test_data, cfg)
        out[learner] = run.final_test_acc
        log.info("victim %s: %.2f%% test accuracy", learner, run.final_test_acc)
    return out


# ---------------------------------------------------------------------------
# sweeps


def _parse_pgd_ratio(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)) and len(value) == 2:
        return int(value[0]), int(value[1])
    if isinstance(value, str) and ":" in value:
        sl, cl = value.split(":", 1)
        return int(sl), int(cl)
    raise ConfigError(f"pgd_ratio values look like '5:3' (sl:cl), got {value!r}")


def apply_sweep_axis(cfg: AttackConfig, axis: str, value) -> AttackConfig:
    if axis == "lambda_weight":
        return replace(cfg, loss=replace(cfg.loss, lam=float(value)))
    if axis == "pgd_ratio":
        steps_sl, steps_cl = _parse_pgd_ratio(value)
        return replace(cfg, pgd_steps_sl=steps_sl, pgd_steps_cl=steps_cl)
    if axis == "epochs":
        return replace(cfg, epochs=int(value))
    if axis == "budget":
        return replace(cfg, epsilon=float(value))
    if axis == "poison_ratio":
        return cfg  # applied at poison time, not generation time
    raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")


@dataclass
class SweepPoint:
    axis: str
    value: object
    poison: PerturbationSet
    accuracies: dict[str, float]
    clean_only: dict[str, float] | None = None  # control trained on unpoisoned remainder


def run_sweep(
    axis: str,
    values,
    attack_cfg: AttackConfig,
    victim_cfg: VictimConfig,
    train_data: Dataset,
    test_data: Dataset,
    learners=("sl",),
) -> list[SweepPoint]:
    """One attack + victim-suite run per axis value.

    poison_ratio sweeps generate the poison once and vary the poisoned
    fraction; each point also trains a control on only the clean remainder
    (skipped at ratio 1.0, where no clean samples remain).
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}, expected one of {SWEEP_AXES}")
    points = []
    shared_poison = None
    if axis == "poison_ratio":
        shared_poison = run_attack(train_data, attack_cfg).poison
    for i, value in enumerate(values):
        if axis == "poison_ratio":
            ratio = float(value)
            poison = shared_poison
            mask_gen = make_generator(attack_cfg.seed, "mask", i)
            view = apply_poison(train_data, poison, ratio, mask_gen)
            accuracies = run_victim_suite(view, test_data, learners, victim_cfg)
            clean_only = None
            if ratio < 1.0:
                keep = torch.nonzero(~view.mask, as_tuple=False).flatten()
                remainder = subset(train_data, keep)
                clean_only = run_victim_suite(remainder, test_data, learners, victim_cfg)
            points.append(SweepPoint(axis, value, poison, accuracies, clean_only))
        else:
            cfg_i = apply_sweep_axis(attack_cfg, axis, value)
            poison = run_attack(train_data, cfg_i).poison
            view = apply_poison(train_data, poison, 1.0)
            accuracies = run_victim_suite(view, test_data, learners, victim_cfg)
            points.append(SweepPoint(axis, value, poison, accuracies))
        log.info("sweep %s=%s done", axis, value)
    return points


SWEEP_CSV_HEADER = "axis,value,mode,learner,accuracy,seed,dataset,epsilon"


def sweep_to_csv(points: list[SweepPoint], seed: int, dataset_tag: str) -> str:
    lines = [SWEEP_CSV_HEADER]
    for p in points:
        modes = [("poisoned", p.accuracies)]
        if p.clean_only is not None:
            modes.append(("clean_only", p.clean_only))
        for mode, accs in modes:
            for learner in sorted(accs):
                lines.append(
                    f"{p.axis},{p.value},{mode},{learner},{accs[learner]!r},"
                    f"{seed},{dataset_tag},{p.poison.epsilon!r}"
                )
    return "\n".join(lines) + "\n"
