"""Flat key = value config files with one section per component.

    [attack]
    variant = tp
    epsilon = 8/255
    epochs = 300

    [victim]
    learner = simclr
    pretrain_epochs = 1000

    [augment]      # applies to both the attack views and victim pretraining
    flip_prob = 0.5

    [data]
    root = /path/to/dataset

Files without a section header are read as [attack] settings. Unknown keys
and unknown sections are hard errors; numeric values accept fractions like
8/255. An empty file yields the full default configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .attacks import AttackConfig
from .data import AugmentConfig
from .errors import ConfigError
from .losses import ContrastiveLossConfig
from .victims import VictimConfig


@dataclass
class DataConfig:
    root: str | None = None
    train_split: str = "train"
    test_split: str = "test"


@dataclass
class ExperimentConfig:
    attack: AttackConfig = field(default_factory=AttackConfig)
    victim: VictimConfig = field(default_factory=VictimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.attack.validate()
        self.victim.validate()
        return self


def parse_number(text: str) -> float:
    """Float literal or a/b fraction ("8/255")."""
    text = text.strip()
    try:
        if "/" in text:
            num, den = text.split("/", 1)
            value = float(num) / float(den)
        else:
            value = float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc
    return value


def _parse_int(text: str) -> int:
    try:
        return int(text.strip())
    except ValueError as exc:
        raise ConfigError(f"not an integer: {text!r}") from exc


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_fractions(text: str) -> tuple[float, ...]:
    return tuple(parse_number(part) for part in text.split(",") if part.strip())


def _parse_optional_int(text: str) -> int | None:
    if text.strip().lower() in ("auto", "none", ""):
        return None
    return _parse_int(text)


_STR = lambda s: s.strip()  # noqa: E731

# key -> (parser, path) where path addresses a field on ExperimentConfig
_ATTACK_KEYS = {
    "variant": (_STR, "variant"),
    "epsilon": (parse_number, "epsilon"),
    "epochs": (_parse_int, "epochs"),
    "batch_size": (_parse_int, "batch_size"),
    "batches_per_phase": (_parse_optional_int, "batches_per_phase"),
    "pgd_steps_sl": (_parse_int, "pgd_steps_sl"),
    "pgd_steps_cl": (_parse_int, "pgd_steps_cl"),
    "pgd_alpha_sl": (parse_number, "pgd_alpha_sl"),
    "pgd_alpha_cl": (parse_number, "pgd_alpha_cl"),
    "lr_sl": (parse_number, "lr_sl"),
    "lr_cl": (parse_number, "lr_cl"),
    "momentum": (parse_number, "momentum"),
    "weight_decay_sl": (parse_number, "weight_decay_sl"),
    "weight_decay_cl": (parse_number, "weight_decay_cl"),
    "lambda": (parse_number, "loss.lam"),
    "align_alpha": (parse_number, "loss.align_alpha"),
    "uniform_t": (parse_number, "loss.uniform_t"),
    "temperature": (parse_number, "loss.temperature"),
    "arch": (_STR, "arch"),
    "embed_dim": (_parse_int, "embed_dim"),
    "seed": (_parse_int, "seed"),
    "share_backbone": (_parse_bool, "share_backbone"),
    "delta_init": (_STR, "delta_init"),
    "delta_after_augment": (_parse_bool, "delta_after_augment"),
    "sl_phase_first": (_parse_bool, "sl_phase_first"),
    "tap_pretrain_epochs": (_parse_int, "tap_pretrain_epochs"),
}

_VICTIM_KEYS = {
    "learner": (_STR, "learner"),
    "epochs": (_parse_int, "epochs"),
    "pretrain_epochs": (_parse_int, "pretrain_epochs"),
    "probe_epochs": (_parse_int, "probe_epochs"),
    "lr_sl": (parse_number, "lr_sl"),
    "sl_milestones": (_parse_fractions, "sl_milestones"),
    "sl_gamma": (parse_number, "sl_gamma"),
    "weight_decay_sl": (parse_number, "weight_decay_sl"),
    "lr_pretrain": (parse_number, "lr_pretrain"),
    "weight_decay_pretrain": (parse_number, "weight_decay_pretrain"),
    "lr_probe": (parse_number, "lr_probe"),
    "probe_gamma": (parse_number, "probe_gamma"),
    "weight_decay_probe": (parse_number, "weight_decay_probe"),
    "momentum": (parse_number, "momentum"),
    "temperature": (parse_number, "temperature"),
    "batch_size": (_parse_int, "batch_size"),
    "batch_size_pretrain": (_parse_int, "batch_size_pretrain"),
    "scale_factor": (parse_number, "scale_factor"),
    "seed": (_parse_int, "seed"),
    "arch": (_STR, "arch"),
    "embed_dim": (_parse_int, "embed_dim"),
    "sl_augment": (_parse_bool, "sl_augment"),
}

_AUGMENT_KEYS = {
    "crop_scale_min": parse_number,
    "crop_scale_max": parse_number,
    "crop_ratio_min": parse_number,
    "crop_ratio_max": parse_number,
    "flip_prob": parse_number,
    "jitter_prob": parse_number,
    "jitter_strength": parse_number,
    "grayscale_prob": parse_number,
}

_DATA_KEYS = {"root": _STR, "train_split": _STR, "test_split": _STR}

_SECTIONS = ("attack", "victim", "augment", "data")


def _split_sections(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if current is None:
            current = "attack"
            sections.setdefault(current, {})
        if key in sections[current]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in section [{current}]")
        sections[current][key] = value
    return sections


def _set_path(obj, path: str, value):
    parts = path.split(".")
    target = obj
    for part in parts[:-1]:
        target = getattr(target, part)
    setattr(target, parts[-1], value)


def parse_config_text(text: str) -> ExperimentConfig:
    sections = _split_sections(text)
    cfg = ExperimentConfig()
    # loss and augment are frozen-ish shared defaults; rebuild them mutable
    cfg.attack = replace(cfg.attack, loss=ContrastiveLossConfig())

    for key, value in sections.get("attack", {}).items():
        if key not in _ATTACK_KEYS:
            raise ConfigError(f"unknown key {key!r} in section [attack]")
        parser, path = _ATTACK_KEYS[key]
        _set_path(cfg.attack, path, parser(value))

    for key, value in sections.get("victim", {}).items():
        if key not in _VICTIM_KEYS:
            raise ConfigError(f"unknown key {key!r} in section [victim]")
        parser, path = _VICTIM_KEYS[key]
        _set_path(cfg.victim, path, parser(value))

    aug_section = sections.get("augment", {})
    if aug_section:
        base = cfg.attack.augment
        fields = {
            "crop_scale": list(base.crop_scale),
            "crop_ratio": list(base.crop_ratio),
            "flip_prob": base.flip_prob,
            "jitter_prob": base.jitter_prob,
            "jitter_strength": base.jitter_strength,
            "grayscale_prob": base.grayscale_prob,
        }
        for key, value in aug_section.items():
            if key not in _AUGMENT_KEYS:
                raise ConfigError(f"unknown key {key!r} in section [augment]")
            parsed = _AUGMENT_KEYS[key](value)
            if key == "crop_scale_min":
                fields["crop_scale"][0] = parsed
            elif key == "crop_scale_max":
                fields["crop_scale"][1] = parsed
            elif key == "crop_ratio_min":
                fields["crop_ratio"][0] = parsed
            elif key == "crop_ratio_max":
                fields["crop_ratio"][1] = parsed
            else:
                fields[key] = parsed
        augment = AugmentConfig(
            crop_scale=tuple(fields["crop_scale"]),
            crop_ratio=tuple(fields["crop_ratio"]),
            flip_prob=fields["flip_prob"],
            jitter_prob=fields["jitter_prob"],
            jitter_strength=fields["jitter_strength"],
            grayscale_prob=fields["grayscale_prob"],
        )
        cfg.attack = replace(cfg.attack, augment=augment)
        cfg.victim.augment = augment

    for key, value in sections.get("data", {}).items():
        if key not in _DATA_KEYS:
            raise ConfigError(f"unknown key {key!r} in section [data]")
        setattr(cfg.data, key, _DATA_KEYS[key](value))

    try:
        cfg.validate()
    except ValueError as exc:  # augment validation raises plain ValueError
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text())
