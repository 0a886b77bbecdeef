"""Deterministic random streams.

Every random decision in the package flows from one 64-bit seed. Independent
consumers (trainer, relevance fitting, synthetic data) get their own stream
by spawning a child generator with a fixed integer path, so adding draws in
one module can never shift the draws seen by another.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

STREAM_TRAIN = 0
STREAM_RELEVANCE = 1
STREAM_SYNTH = 2

_MAX_SEED = 2**64 - 1


def check_seed(seed: int) -> int:
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed <= _MAX_SEED:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    return seed


def spawn_rng(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the stream identified by `path` under `seed`."""
    check_seed(seed)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))
