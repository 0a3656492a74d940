"""Counter-based random streams.

Every random draw in a search or training run is addressed by a key
(seed, instance id, attempt, ...) instead of being pulled from a shared
sequential generator, so the schedule of workers cannot change results.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox generator for ``(seed, *key)``."""
    words = [int(seed) & _MASK64] + [int(k) & _MASK64 for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def attempt_uniforms(seed: int, instance_ids, attempt: int, n_starts: int, horizon: int,
                     salt: int = 0) -> np.ndarray:
    """Uniforms of shape (instances, starts, horizon) for one attempt.

    Row ``[i, p]`` occupies a fixed counter range of the (instance, attempt)
    stream, so it depends only on (seed, instance, attempt, start).
    """
    out = np.empty((len(instance_ids), n_starts, horizon), dtype=np.float64)
    for i, iid in enumerate(instance_ids):
        out[i] = stream(seed, salt, iid, attempt).random((n_starts, horizon))
    return out


def instance_id(seed: int, index: int) -> int:
    """64-bit instance identifier derived from the generation seed."""
    lo, hi = np.random.SeedSequence([int(seed) & _MASK64, 0x1D, index]).generate_state(2)
    return (int(hi) << 32) | int(lo)
