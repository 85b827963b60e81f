"""Deterministic RNG stream derivation.

Every source of randomness in the engine is a named child stream of one
root seed, so a whole sweep is reproducible from a single integer and
independent components (scene sampling, oracle draws, rollouts) never
share a stream.
"""

import numpy as np

# Stream tags. Values are arbitrary but frozen: changing them changes
# every derived stream.
TASKGEN = 11
SCENE = 23
ORACLE = 37
POLICY = 41
IRL_ROLLOUT = 53
IRL_VALIDATION = 59
EXPERT = 67


def derive(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the child stream ``(seed, *path)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in path]]))


def derive_seed(seed: int, *path: int) -> int:
    """Collapse a child stream to a plain integer seed (for sub-configs)."""
    return int(np.random.SeedSequence([int(seed), *[int(p) for p in path]]).generate_state(1)[0])
