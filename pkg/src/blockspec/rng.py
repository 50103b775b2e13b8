"""Counter-based deterministic RNG.

Every stochastic decision in decoding is keyed by (seed, absolute position,
stream), so results are reproducible and independent of how decode cycles
happen to be segmented. Philox is counter-based, so constructing a fresh
generator per draw is cheap and stateless.
"""

from __future__ import annotations

import numpy as np

# Independent streams per decision kind.
STREAM_AR = 0  # autoregressive sampling
STREAM_DRAFT = 1  # drafter slot sampling
STREAM_ACCEPT = 2  # rejection-rule uniform draws
STREAM_BONUS = 3  # bonus / residual-distribution draws


def keyed_rng(seed: int, position: int, stream: int = 0) -> np.random.Generator:
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64((stream << 48) ^ position)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def keyed_uniform(seed: int, position: int, stream: int) -> float:
    return float(keyed_rng(seed, position, stream).random())


def keyed_categorical(probs: np.ndarray, seed: int, position: int, stream: int) -> int:
    """Inverse-CDF draw from a probability vector."""
    u = keyed_uniform(seed, position, stream)
    cdf = np.cumsum(probs.astype(np.float64))
    cdf /= cdf[-1]
    return int(np.searchsorted(cdf, u, side="right"))
