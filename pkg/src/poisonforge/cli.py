"""Command line interface.

    poisonforge poison       --variant tp --config exp.cfg --data ROOT --out p.pf
    poisonforge train-victim --learner simclr --poison p.pf --data ROOT --out RUNDIR
    poisonforge report       --runs RUNDIR [RUNDIR ...] --out report.csv
    poisonforge sweep        --axis budget --values 4/255,8/255 --data ROOT --out DIR
    poisonforge export-noise --poison p.pf --data ROOT --out DIR

The data root comes from --data or the POISONFORGE_DATA_ROOT environment
variable. Every command writes a JSON manifest listing the artifacts it
produced. Exit codes: 0 success, 2 bad configuration or data, 3 numeric
failure during optimization.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import __version__
from .attacks import VARIANTS, run_attack
from .config import ExperimentConfig, parse_config, parse_number
from .data import (
    Dataset,
    apply_poison,
    load_dataset,
    resolve_data_root,
)
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    SWEEP_AXES,
    ReportRow,
    UnlearnabilityReport,
    render_report,
    run_sweep,
    sweep_to_csv,
)
from .models import save_checkpoint
from .perturb import PerturbationSet, load_poison, save_poison
from .victims import LEARNERS, train_victim

log = logging.getLogger("poisonforge")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    seed: int
    config: dict
    started_at: str
    finished_at: str
    artifacts: list[str] = field(default_factory=list)
    dataset_fingerprint: str | None = None
    extra: dict = field(default_factory=dict)
    version: str = __version__

    def write(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        os.replace(tmp, path)
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        payload = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in payload.items() if k in known})


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    else:
        cfg = ExperimentConfig()
    return cfg


def _apply_attack_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    attack = cfg.attack
    if getattr(args, "variant", None):
        attack = replace(attack, variant=args.variant)
    if getattr(args, "seed", None) is not None:
        attack = replace(attack, seed=args.seed)
    if getattr(args, "epsilon", None):
        attack = replace(attack, epsilon=parse_number(args.epsilon))
    if getattr(args, "epochs", None) is not None:
        attack = replace(attack, epochs=args.epochs)
    cfg.attack = attack.validate()
    return cfg


def _setup_threads(args):
    torch.set_num_threads(getattr(args, "threads", 1) or 1)


def _load_split(args, cfg: ExperimentConfig, split: str) -> Dataset:
    root = resolve_data_root(getattr(args, "data", None) or cfg.data.root)
    return load_dataset(root, split)


# ---------------------------------------------------------------------------
# commands


def cmd_poison(args) -> int:
    started = _now()
    cfg = _apply_attack_overrides(_load_config(args), args)
    _setup_threads(args)
    dataset = _load_split(args, cfg, args.split or cfg.data.train_split)
    log.info(
        "generating %s poison: %d samples, epsilon %.5f, %d epochs",
        cfg.attack.variant, len(dataset), cfg.attack.epsilon, cfg.attack.epochs,
    )
    result = run_attack(dataset, cfg.attack)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_poison(result.poison, out)
    manifest = RunManifest(
        command="poison",
        argv=list(sys.argv[1:]),
        seed=cfg.attack.seed,
        config=asdict(cfg),
        started_at=started,
        finished_at=_now(),
        artifacts=[str(out)],
        dataset_fingerprint=dataset.fingerprint(),
        extra={
            "variant": cfg.attack.variant,
            "epsilon": cfg.attack.epsilon,
            "sample_count": result.poison.sample_count,
            "max_abs_delta": result.poison.max_abs(),
        },
    )
    manifest_path = manifest.write(out.parent / (out.name + ".manifest.json"))
    manifest.artifacts.append(str(manifest_path))
    log.info("wrote %s", out)
    return 0


def cmd_train_victim(args) -> int:
    started = _now()
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.victim.seed = args.seed
    if args.learner:
        cfg.victim.learner = args.learner
    cfg.victim.validate()
    _setup_threads(args)
    train_ds = _load_split(args, cfg, cfg.data.train_split)
    test_ds = _load_split(args, cfg, cfg.data.test_split)

    if args.poison:
        poison = load_poison(args.poison, dataset=train_ds)
        attack_name = poison.attack or "unknown"
        epsilon = poison.epsilon
    else:
        poison = PerturbationSet(
            torch.zeros_like(train_ds.images), 0.0, train_ds.fingerprint(), attack="clean"
        )
        attack_name = "clean"
        epsilon = 0.0
    ratio = args.ratio
    mask_gen = torch.Generator().manual_seed(cfg.victim.seed) if ratio < 1.0 else None
    view = apply_poison(train_ds, poison, ratio, mask_gen)

    learner = cfg.victim.learner
    log.info("training %s victim on %s data (ratio %.2f)", learner, attack_name, ratio)
    run = train_victim(learner, view, test_ds, cfg.victim)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt"
    save_checkpoint(run.model, ckpt, extra={"learner": learner, "attack": attack_name})
    curves = out / "curves.csv"
    run.curve.save_csv(curves)
    artifacts = [str(ckpt), str(curves)]
    if run.pretrain_losses is not None:
        loss_path = out / "pretrain_loss.csv"
        lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(run.pretrain_losses)]
        loss_path.write_text("\n".join(lines) + "\n")
        artifacts.append(str(loss_path))

    manifest = RunManifest(
        command="train-victim",
        argv=list(sys.argv[1:]),
        seed=cfg.victim.seed,
        config=asdict(cfg),
        started_at=started,
        finished_at=_now(),
        artifacts=artifacts,
        dataset_fingerprint=train_ds.fingerprint(),
        extra={
            "learner": learner,
            "attack": attack_name,
            "epsilon": epsilon,
            "poison_ratio": ratio,
            "final_test_acc": run.final_test_acc,
            "final_train_acc": run.curve.final_train_acc,
        },
    )
    manifest_path = manifest.write(out / "manifest.json")
    manifest.artifacts.append(str(manifest_path))
    log.info("final test accuracy: %.2f%%", run.final_test_acc)
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.runs:
        manifest_path = Path(run_dir) / "manifest.json"
        if not manifest_path.is_file():
            raise DataError(f"no manifest.json in run directory: {run_dir}")
        m = RunManifest.read(manifest_path)
        if m.command != "train-victim":
            raise DataError(f"not a victim run (command={m.command!r}): {run_dir}")
        rows.append(
            ReportRow(
                attack=m.extra["attack"],
                learner=m.extra["learner"],
                accuracy=float(m.extra["final_test_acc"]),
                seed=int(m.seed),
                dataset=(m.dataset_fingerprint or "")[:12],
                epsilon=float(m.extra["epsilon"]),
            )
        )
    report = UnlearnabilityReport(rows)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    txt = out.with_suffix(".txt")
    render_report(report, out, txt)
    for attack in report.attacks():
        log.info("%s: worst-case accuracy %.2f%%", attack, report.worst(attack))
    print(report.to_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    started = _now()
    cfg = _apply_attack_overrides(_load_config(args), args)
    _setup_threads(args)
    train_ds = _load_split(args, cfg, cfg.data.train_split)
    test_ds = _load_split(args, cfg, cfg.data.test_split)
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {args.axis!r}, expected one of {SWEEP_AXES}")
    raw_values = [v for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise ConfigError("no sweep values given")
    if args.axis in ("lambda_weight", "budget", "poison_ratio"):
        values = [parse_number(v) for v in raw_values]
    elif args.axis == "epochs":
        values = [int(v) for v in raw_values]
    else:  # pgd_ratio keeps the "sl:cl" strings
        values = [v.strip() for v in raw_values]
    learners = [l.strip() for l in args.learners.split(",") if l.strip()]
    for learner in learners:
        if learner not in LEARNERS:
            raise ConfigError(f"unknown learner {learner!r}, expected one of {LEARNERS}")

    points = run_sweep(args.axis, values, cfg.attack, cfg.victim, train_ds, test_ds, learners)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for point in points:
        tag = str(point.value).replace("/", "-").replace(":", "-")
        ppath = out / f"poison_{args.axis}_{tag}.pf"
        save_poison(point.poison, ppath)
        artifacts.append(str(ppath))
    csv_path = out / "sweep.csv"
    csv_path.write_text(sweep_to_csv(points, cfg.attack.seed, train_ds.fingerprint()[:12]))
    artifacts.append(str(csv_path))
    manifest = RunManifest(
        command="sweep",
        argv=list(sys.argv[1:]),
        seed=cfg.attack.seed,
        config=asdict(cfg),
        started_at=started,
        finished_at=_now(),
        artifacts=artifacts,
        dataset_fingerprint=train_ds.fingerprint(),
        extra={"axis": args.axis, "values": [str(v) for v in values], "learners": learners},
    )
    manifest.write(out / "manifest.json")
    return 0


def export_perturbation_images(
    poison: PerturbationSet, dataset: Dataset, out_dir, per_class: int = 1
) -> list[Path]:
    """Write per-class triples: the original image, the perturbation rescaled
    by (delta + eps) / (2 eps) onto [0, 1], and the clipped poisoned image."""
    from .data import _save_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    poison.for_dataset(dataset)
    written = []
    scaled = poison.scaled_to_unit()
    for cls in range(dataset.class_count):
        ids = torch.nonzero(dataset.labels == cls, as_tuple=False).flatten()[:per_class]
        for i in ids.tolist():
            original = dataset.images[i]
            poisoned = (original + poison.deltas[i]).clamp(0, 1)
            for tag, img in (("original", original), ("noise", scaled[i]), ("poisoned", poisoned)):
                path = out_dir / f"{tag}_c{cls}_i{i}.png"
                _save_png(img, path)
                written.append(path)
    return written


def cmd_export_noise(args) -> int:
    started = _now()
    cfg = _load_config(args)
    train_ds = _load_split(args, cfg, args.split or cfg.data.train_split)
    poison = load_poison(args.poison, dataset=train_ds)
    written = export_perturbation_images(poison, train_ds, args.out, args.per_class)
    manifest = RunManifest(
        command="export-noise",
        argv=list(sys.argv[1:]),
        seed=poison.seed if poison.seed is not None else 0,
        config=asdict(cfg),
        started_at=started,
        finished_at=_now(),
        artifacts=[str(p) for p in written],
        dataset_fingerprint=train_ds.fingerprint(),
        extra={"attack": poison.attack, "epsilon": poison.epsilon, "images": len(written)},
    )
    manifest.write(Path(args.out) / "manifest.json")
    log.info("wrote %d images to %s", len(written), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poisonforge",
        description="Generate availability poisons and evaluate worst-case unlearnability.",
    )
    parser.add_argument("--version", action="version", version=f"poisonforge {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", help="generate a perturbation set")
    p.add_argument("--variant", choices=VARIANTS, default=None, help="attack variant")
    p.add_argument("--config", default=None, help="config file")
    p.add_argument("--data", default=None, help="dataset root (or POISONFORGE_DATA_ROOT)")
    p.add_argument("--split", default=None, help="split to poison (default from config)")
    p.add_argument("--out", required=True, help="output poison file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epsilon", default=None, help="budget override, e.g. 8/255")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_poison)

    p = sub.add_parser("train-victim", help="train a victim learner and record accuracy")
    p.add_argument("--learner", choices=LEARNERS, default=None)
    p.add_argument("--poison", default=None, help="poison file (omit to train clean)")
    p.add_argument("--ratio", type=float, default=1.0, help="poisoned fraction of the train set")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("report", help="aggregate victim runs into a worst-case table")
    p.add_argument("--runs", nargs="+", required=True, help="victim run directories")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="sweep one attack axis and evaluate victims")
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--learners", default="sl", help="comma-separated victim learners")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-noise", help="export per-class original/noise/poisoned images")
    p.add_argument("--poison", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", type=int, default=1, dest="per_class")
    p.set_defaults(func=cmd_export_noise)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
