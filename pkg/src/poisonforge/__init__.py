"""poisonforge: availability-poisoning perturbations for image classifiers
and worst-case unlearnability evaluation across supervised and contrastive
victim learners."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, PhaseEvent, run_attack  # noqa: F401
from .data import (  # noqa: F401
    AugmentConfig,
    Dataset,
    PoisonedDatasetView,
    apply_poison,
    load_dataset,
)
from .errors import ConfigError, DataError, NumericError  # noqa: F401
from .evaluation import UnlearnabilityReport, run_sweep, worst_case  # noqa: F401
from .losses import ContrastiveLossConfig  # noqa: F401
from .perturb import PerturbationSet, load_poison, pgd_update, save_poison  # noqa: F401
from .victims import VictimConfig, train_victim  # noqa: F401
