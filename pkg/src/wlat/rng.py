"""Seeded random number generation used by every stochastic component.

All randomness in this package (synthetic data, weight init, dropout masks,
batch shuffling) flows through PCG64 generators created here, so any run is
a pure function of its seeds.  Gaussian variates are produced by the
Box-Muller transform on the generator's uniform doubles rather than by
``Generator.standard_normal``; the exact draw sequence is therefore pinned
to two documented primitives (PCG64 64-bit output -> 53-bit uniform double,
Box-Muller pairing) and can be replayed outside numpy.
"""

from __future__ import annotations

import numpy as np

__all__ = ["new_rng", "gaussian", "spawn_seeds"]


def new_rng(seed: int) -> np.random.Generator:
    """Create the package-standard generator (PCG64) for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal draws via Box-Muller on ``rng``'s uniform doubles.

    Consumes ceil(n/2) pairs of uniforms for n variates.  The first uniform
    of each pair is mapped to (0, 1] so the log never sees zero.
    """
    n = int(np.prod(shape)) if np.ndim(shape) else int(shape)
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
    return z.reshape(shape)


def spawn_seeds(seed: int, count: int) -> list[int]:
    """Derive ``count`` independent child seeds from one master seed.

    Uses SeedSequence spawning, so the children do not alias the words
    ``PCG64(seed)`` itself consumes and streams stay independent even when
    a child seed is fed back into :func:`new_rng`.
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]
