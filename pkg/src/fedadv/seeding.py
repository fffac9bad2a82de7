"""Deterministic derivation of independent random streams.

Every stochastic component keys its generator off (base seed, stream
tag, *context ints), so runs are reproducible and no component's draws
shift when another component changes how much randomness it consumes.
"""

from __future__ import annotations

import numpy as np

# Stream tags.  Keep these stable: changing them changes every seeded run.
SAMPLING = 1      # per-round client sampling
TRAINING = 2      # per-client, per-epoch batch order and dropout
NOISE_UPLINK = 3  # per-round, per-client update noise
NOISE_DOWNLINK = 4
ATTACK = 5        # per-role attack randomness
PARTITION = 6     # per-client train/test split


def derive_rng(*keys: int) -> np.random.Generator:
    """A fresh generator for the given key path."""
    return np.random.default_rng([int(k) for k in keys])


def derive_seed(*keys: int) -> int:
    """A 32-bit integer seed for components that take seeds, not rngs."""
    seq = np.random.SeedSequence([int(k) for k in keys])
    return int(seq.generate_state(1)[0])
