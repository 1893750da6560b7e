"""Deterministic random streams.

Every source of randomness in the package flows through a counter-based
Philox generator keyed by a seed plus a tuple of integer sub-keys.  Streams
with distinct keys are statistically independent and may be consumed in any
order across threads without affecting each other, which is what makes
multi-threaded ensemble runs bit-reproducible.
"""

from __future__ import annotations

import numpy as np

# Namespace constants keep unrelated draws on disjoint keys.
AGENT_STREAM = 1      # per-agent data sampling inside a diffusion run
INIT_STREAM = 2       # initial-iterate dispersion
EVAL_STREAM = 3       # fixed high-accuracy evaluation sample sets
MOMENT_STREAM = 4     # gradient-noise moment estimation
TOPOLOGY_STREAM = 5   # random graph generation
MEMBER_STREAM = 6     # ensemble member seed derivation
BOX_STREAM = 7        # sample-box draws for constant estimation


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """Stable 64-bit sub-seed for the stream identified by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, np.uint64)[0])
