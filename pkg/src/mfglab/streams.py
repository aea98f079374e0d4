"""Counter-based random streams for bit-reproducible simulation.

Every consumer of randomness opens a Philox generator keyed by
(seed, purpose tag, step index).  Draw i of a keyed block belongs to
particle i, so the noise a particle sees is a pure function of
(seed, particle, step) and results do not depend on how work is split
across workers.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# Purpose tags for the second key word.
TAG_INIT = 0       # initial-condition uniforms
TAG_NOISE = 1      # Gaussian increments of the driving noise
TAG_BRIDGE = 2     # uniforms for sub-step barrier-crossing draws
TAG_PROBE = 3      # assumption-probe sampling

_MAX_SEED = 2**63
_MAX_INDEX = 2**48


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Generator for the (seed, tag, index) block of the Philox keyspace."""
    if not 0 <= seed < _MAX_SEED:
        raise ConfigError(f"seed must be in [0, 2^63), got {seed}")
    if not 0 <= index < _MAX_INDEX:
        raise ConfigError(f"stream index out of range: {index}")
    key = np.array([seed, (tag << 48) + index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *parts: int) -> int:
    """Deterministically derive a fresh 63-bit seed for a sub-experiment."""
    state = np.random.SeedSequence(entropy=(int(seed),) + tuple(int(p) for p in parts))
    return int(state.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
