"""Named RNG substreams derived from a single master seed.

Every stochastic component (init, batch order, augmentation, poison mask, ...)
pulls its own torch.Generator keyed by (master_seed, name). Streams are
independent of call order and of how many draws other components consume, so
adding instrumentation never shifts downstream randomness.
"""

from __future__ import annotations

import hashlib

import torch


def substream_seed(master_seed: int, *names) -> int:
    """Stable 63-bit seed for the substream identified by `names`."""
    tag = "/".join(str(n) for n in names)
    digest = hashlib.sha256(f"{master_seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(master_seed: int, *names) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(master_seed, *names))
    return gen
