"""Deterministic RNG derivation.

Every stochastic component draws from its own stream, derived from
(base seed, stream tag, ...indices) through ``numpy.random.SeedSequence``.
Streams are therefore independent of each other and of evaluation order,
which is what makes parallel generation / data loading reproducible.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes
# every derived stream.
TAG_RECORD = 1  # phantom generation, one stream per (seed, index)
TAG_INIT = 2  # network parameter initialization
TAG_HEADS = 3  # per-step head selection during training
TAG_ORDER = 4  # per-epoch record ordering
TAG_SAMPLE = 5  # per-(epoch, record) augmentation + patch draws
TAG_FOLDS = 6  # cross-validation shuffling


def seed_sequence(*keys: int) -> np.random.SeedSequence:
    for k in keys:
        if int(k) < 0:
            raise ValueError(f"seed keys must be non-negative, got {k}")
    return np.random.SeedSequence([int(k) for k in keys])


def rng(*keys: int) -> np.random.Generator:
    """A PCG64 generator for the stream identified by ``keys``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(*keys)))


def torch_seed(*keys: int) -> int:
    """A 63-bit seed for ``torch.Generator.manual_seed``."""
    state = seed_sequence(*keys).generate_state(1, np.uint64)[0]
    return int(state & np.uint64(0x7FFF_FFFF_FFFF_FFFF))
