import hashlib
import json
import os
from pathlib import Path

import pytest
import torch

import synth
from poisonforge.data import Dataset

torch.set_num_threads(1)

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"

# one line per acceptance check, shown as a terminal section after the run
ACCEPTANCE_LINES = []


def record_verdict(line: str):
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance checks")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_configure(config):
    CACHE_DIR.mkdir(exist_ok=True)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


def random_dataset(n=40, classes=4, hw=12, channels=3, seed=0, split="train") -> Dataset:
    """Small random-noise dataset for mechanics tests (no learnable signal)."""
    g = torch.Generator().manual_seed(seed)
    images = torch.rand(n, channels, hw, hw, generator=g)
    labels = (torch.arange(n) % classes).long()
    return Dataset(images, labels, [f"c{i}" for i in range(classes)], split_tag=split)


@pytest.fixture
def tiny_dataset():
    return random_dataset()


# ---------------------------------------------------------------------------
# desk-scale corpus and artifact cache for the slow training criteria


@pytest.fixture(scope="session")
def desk_train():
    return synth.make_dataset(per_class=500, seed=101, split="train")


@pytest.fixture(scope="session")
def desk_test():
    return synth.make_dataset(per_class=100, seed=202, split="test")


def cached_json(key: str, compute):
    """Memoize a JSON-serializable result on disk.

    Training runs are deterministic (single-threaded, seeded substreams), so a
    cache hit is byte-equivalent to recomputation; delete .cache/ for a cold
    run."""
    digest = hashlib.sha256(key.encode()).hexdigest()[:24]
    path = CACHE_DIR / f"{digest}.json"
    if path.is_file():
        return json.loads(path.read_text())
    result = compute()
    path.write_text(json.dumps(result))
    return result


def cached_poison(key: str, compute):
    """Memoize a PerturbationSet via the artifact format."""
    from poisonforge.perturb import load_poison, save_poison

    digest = hashlib.sha256(key.encode()).hexdigest()[:24]
    path = CACHE_DIR / f"{digest}.pf"
    if path.is_file():
        return load_poison(path)
    result = compute()
    save_poison(result, path)
    return result
