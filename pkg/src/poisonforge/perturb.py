"""Perturbation budgets, sign-PGD updates, and the poison artifact format.

A PerturbationSet is one float32 delta per training sample, bound to the
dataset it was generated for via a sha256 content fingerprint. The l-inf
budget is an exact invariant: construction and loading both reject any
entry with |delta| > epsilon.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DataError, NumericError

MAGIC = b"PFPOISON"
FORMAT_VERSION = 1


@dataclass
class PGDConfig:
    steps: int = 5
    step_frac: float = 0.1  # step size as a fraction of epsilon
    direction: str = "minimize"

    def validate(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_frac <= 0:
            raise ValueError(f"step_frac must be positive, got {self.step_frac}")
        if self.direction not in ("minimize", "maximize"):
            raise ValueError(f"direction must be minimize or maximize, got {self.direction!r}")
        return self


def project_linf(deltas: torch.Tensor, epsilon: float) -> torch.Tensor:
    return deltas.clamp(-epsilon, epsilon)


def pgd_update(
    deltas: torch.Tensor,
    grads: torch.Tensor,
    step_size: float,
    epsilon: float,
    direction: str = "minimize",
) -> torch.Tensor:
    """One projected sign step. minimize: delta - a*sgn(g); maximize: delta + a*sgn(g).

    sgn(0) = 0, so zero-gradient coordinates stay put. Non-finite gradients
    abort with the offending batch rows.
    """
    if grads.shape != deltas.shape:
        raise ValueError(
            f"grad shape {tuple(grads.shape)} does not match deltas {tuple(deltas.shape)}"
        )
    finite = torch.isfinite(grads)
    if not finite.all():
        bad_rows = torch.nonzero(~finite.flatten(1).all(dim=1), as_tuple=False).flatten().tolist()
        raise NumericError(f"non-finite gradient in batch rows {bad_rows}")
    sign = torch.sign(grads)
    if direction == "minimize":
        stepped = deltas - step_size * sign
    elif direction == "maximize":
        stepped = deltas + step_size * sign
    else:
        raise ValueError(f"direction must be minimize or maximize, got {direction!r}")
    return project_linf(stepped, epsilon)


@dataclass
class PerturbationSet:
    deltas: torch.Tensor  # (n, C, H, W) float32
    epsilon: float
    dataset_fingerprint: str
    attack: str = ""
    seed: int | None = None
    config_digest: str = ""

    def __post_init__(self):
        if self.deltas.dtype != torch.float32:
            self.deltas = self.deltas.to(torch.float32)
        if self.epsilon < 0:
            raise DataError(f"epsilon must be non-negative, got {self.epsilon}")
        self.check_budget()

    @property
    def sample_count(self) -> int:
        return self.deltas.shape[0]

    def max_abs(self) -> float:
        if self.deltas.numel() == 0:
            return 0.0
        return self.deltas.abs().max().item()

    def budget_bound(self) -> float:
        """The budget in the storage dtype: clamp(-eps, eps) on a float32
        tensor lands on the float32 rounding of eps, which can sit one ulp
        above the double value."""
        return torch.tensor(self.epsilon, dtype=self.deltas.dtype).item()

    def check_budget(self):
        worst = self.max_abs()
        if worst > self.budget_bound():
            raise DataError(
                f"perturbation exceeds budget: max |delta| = {worst!r} > epsilon = {self.epsilon!r}"
            )

    def for_dataset(self, dataset) -> "PerturbationSet":
        """Validate this set against a loaded dataset, raising on mismatch."""
        if self.sample_count != len(dataset):
            raise DataError(
                f"perturbation count {self.sample_count} does not match dataset size {len(dataset)}"
            )
        fp = dataset.fingerprint()
        if self.dataset_fingerprint and self.dataset_fingerprint != fp:
            raise DataError(
                "dataset fingerprint mismatch: poison was generated for "
                f"{self.dataset_fingerprint[:12]}..., dataset is {fp[:12]}..."
            )
        return self

    def scaled_to_unit(self) -> torch.Tensor:
        """(delta + eps) / (2 eps), mapping the budget box onto [0, 1] for export."""
        if self.epsilon == 0:
            return torch.full_like(self.deltas, 0.5)
        return (self.deltas + self.epsilon) / (2.0 * self.epsilon)


def zero_perturbations(dataset, epsilon: float, attack: str = "", seed=None) -> PerturbationSet:
    return PerturbationSet(
        deltas=torch.zeros_like(dataset.images),
        epsilon=epsilon,
        dataset_fingerprint=dataset.fingerprint(),
        attack=attack,
        seed=seed,
    )


def save_poison(pset: PerturbationSet, path):
    pset.check_budget()
    header = {
        "epsilon": pset.epsilon,
        "sample_count": pset.sample_count,
        "shape": list(pset.deltas.shape[1:]),
        "attack": pset.attack,
        "seed": pset.seed,
        "dataset_fingerprint": pset.dataset_fingerprint,
        "config_digest": pset.config_digest,
        "dtype": "<f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    data = pset.deltas.detach().cpu().contiguous().numpy().astype("<f4", copy=False)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(FORMAT_VERSION.to_bytes(4, "little"))
        fh.write(len(header_bytes).to_bytes(4, "little"))
        fh.write(header_bytes)
        fh.write(data.tobytes())


def _read_header(fh, path) -> dict:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise DataError(f"not a poison artifact (bad magic): {path}")
    version = int.from_bytes(fh.read(4), "little")
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported poison format version {version}: {path}")
    header_len = int.from_bytes(fh.read(4), "little")
    raw = fh.read(header_len)
    if len(raw) != header_len:
        raise DataError(f"truncated poison header: {path}")
    try:
        return json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt poison header: {path}: {exc}") from exc


def read_poison_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_poison(path, dataset=None) -> PerturbationSet:
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        raw = fh.read()
    n = header["sample_count"]
    shape = tuple(header["shape"])
    expected = n * int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataError(
            f"truncated poison payload: expected {expected} bytes, found {len(raw)}: {path}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape((n,) + shape).copy()
    pset = PerturbationSet(
        deltas=torch.from_numpy(arr),
        epsilon=float(header["epsilon"]),
        dataset_fingerprint=header.get("dataset_fingerprint", ""),
        attack=header.get("attack", ""),
        seed=header.get("seed"),
        config_digest=header.get("config_digest", ""),
    )
    if dataset is not None:
        pset.for_dataset(dataset)
    return pset
