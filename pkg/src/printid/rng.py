"""Deterministic counter-based random streams.

Every random draw in the pipeline comes from one generator so that a run is
fully reproducible from a single 64-bit master seed, in any implementation
language. The generator is SplitMix64 used in counter mode:

    output(i) = mix64((seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64)

where ``mix64`` is the SplitMix64 finalizer:

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Derived values are defined on top of the raw 64-bit outputs:

* uniform in [0, 1): take the top 53 bits, ``(output >> 11) * 2**-53``.
* standard normal: Box-Muller on consecutive uniform pairs. Normal k of a
  request consumes uniforms (2k, 2k+1) and equals
  ``sqrt(-2*ln(1 - u0)) * cos(2*pi*u1)``. The sine partner is discarded so
  that every normal costs exactly two counter steps.
* seed derivation: ``derive_seed(seed, *parts)`` folds each part (ints used
  directly, strings via 64-bit FNV-1a of their UTF-8 bytes) with
  ``h = mix64((h ^ mix64(part)) + 0x9E3779B97F4A7C15)``.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a 64-bit integer."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & MASK64
    return h


def derive_seed(seed: int, *parts: int | str) -> int:
    """Fan a master seed out into an independent sub-seed.

    Parts identify the consumer, e.g. ``derive_seed(master, "object", 3)``.
    """
    h = seed & MASK64
    for part in parts:
        w = _fnv1a(part.encode("utf-8")) if isinstance(part, str) else part & MASK64
        h = mix64(((h ^ mix64(w)) + _GOLDEN) & MASK64)
    return h


class Stream:
    """Sequential view over the counter-based stream for one seed.

    Bulk and scalar draws consume identical counter ranges, so vectorised
    code reproduces scalar loops bit for bit.
    """

    def __init__(self, seed: int):
        if not 0 <= seed <= MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = seed
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = (np.uint64(self.seed) + idx * np.uint64(_GOLDEN)).astype(np.uint64)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def u64(self, n: int | None = None):
        """Raw 64-bit outputs; scalar when n is None."""
        if n is None:
            return int(self._raw(1)[0])
        return self._raw(n)

    def uniform(self, n: int | None = None):
        """Uniforms in [0, 1) with 53-bit resolution."""
        raw = self._raw(1 if n is None else n)
        vals = (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return float(vals[0]) if n is None else vals

    def normal(self, n: int | None = None):
        """Standard normals via Box-Muller, two uniforms per value."""
        m = 1 if n is None else n
        u = self.uniform(2 * m).reshape(m, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        vals = r * np.cos(2.0 * np.pi * u[:, 1])
        return float(vals[0]) if n is None else vals

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n) driven by the stream.

        Step i in n-1..1 swaps position i with position
        ``floor(uniform() * (i + 1))``.
        """
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
