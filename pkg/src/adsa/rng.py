"""Portable pseudo-random streams, reproducible from a 64-bit seed.

Weights use an LCG feeding Box-Muller::

    state <- (state * 6364136223846793005 + 1442695040888963407) mod 2**64
    u      = ((state >> 11) + 0.5) / 2**53           # in (0, 1)
    z0, z1 = sqrt(-2 ln u1) cos(2 pi u2), sqrt(-2 ln u1) sin(2 pi u2)

The state starts at ``seed mod 2**64`` and is advanced before every draw.
Normals are emitted z0 then z1 for each (u1, u2) pair.

Sampling uses SplitMix64, one draw per generated token.
"""

import math

MASK64 = (1 << 64) - 1
LCG_MUL = 6364136223846793005
LCG_INC = 1442695040888963407
_INV_2_53 = 1.0 / (1 << 53)


class LcgGaussian:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def uniform(self) -> float:
        self.state = (self.state * LCG_MUL + LCG_INC) & MASK64
        return ((self.state >> 11) + 0.5) * _INV_2_53

    def normals(self, n: int) -> list:
        out = []
        while len(out) < n:
            u1 = self.uniform()
            u2 = self.uniform()
            r = math.sqrt(-2.0 * math.log(u1))
            out.append(r * math.cos(2.0 * math.pi * u2))
            out.append(r * math.sin(2.0 * math.pi * u2))
        # an odd request discards the pair's second half
        return out[:n]


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53
