"""Seeded PRNG streams and Box-Muller Gaussian draws.

Every random quantity in the package is drawn from a keyed stream:
``stream(seed, *key)`` derives an independent PCG64 generator from the
run seed plus a structured key (chunk index, chain index, a role tag).
Gaussians are produced by Box-Muller over the generator's uniform
doubles rather than the generator's native normal method, so the exact
byte stream is pinned by this module alone. Keyed derivation makes
per-chain and per-chunk results independent of how work is batched.
"""

from __future__ import annotations

import numpy as np

__all__ = ["stream", "standard_normal"]


def _key_ints(key: tuple) -> list[int]:
    out: list[int] = []
    for part in key:
        if isinstance(part, (int, np.integer)):
            out.append(int(part))
        elif isinstance(part, str):
            # stable string -> ints folding, 8 bytes per word
            data = part.encode("utf-8")
            for i in range(0, len(data), 8):
                out.append(int.from_bytes(data[i : i + 8], "little"))
        else:
            raise ValueError(f"unsupported stream key part: {part!r}")
    return out


def stream(seed: int, *key: int | str) -> np.random.Generator:
    """Derive the PCG64 generator for (seed, key)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)] + _key_ints(key))))


def standard_normal(gen: np.random.Generator, shape: tuple[int, ...] | int) -> np.ndarray:
    """Standard-normal draws via Box-Muller on the generator's uniforms.

    Consumes exactly ceil(n/2) uniform pairs for n variates, in a fixed
    order, so the mapping from stream position to output is part of the
    determinism contract.
    """
    if isinstance(shape, int):
        shape = (shape,)
    n = int(np.prod(shape)) if shape else 1
    if n == 0:
        return np.zeros(shape, dtype=np.float64)
    pairs = (n + 1) // 2
    # u1 in (0, 1]: shift the half-open [0, 1) uniforms away from zero for the log
    u1 = 1.0 - gen.random(pairs)
    u2 = gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
    return z.reshape(shape)
