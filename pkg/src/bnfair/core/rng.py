"""Deterministic random streams: splitmix64 seeding into xoshiro256++.

Every random quantity in the package (weight init, data generation,
augmentations, batch order, search sampling) is drawn from an `RngStream`,
so a 64-bit seed fixes an experiment bit for bit.

Conventions:
  * uniform doubles use the top 53 bits: ``(x >> 11) * 2**-53`` in [0, 1)
  * Gaussian draws use Box-Muller on consecutive uniform pairs (u1, u2);
    ``r = sqrt(-2 ln(1 - u1))`` and the pair yields ``r cos(2 pi u2)`` then
    ``r sin(2 pi u2)``.  Odd requests discard the sine half.
  * integers in [0, n) are ``floor(u * n)`` for one uniform u.
"""
import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def splitmix64(state):
    """One splitmix64 step. Returns ``(new_state, output)`` as python ints."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        result = _rotl(s[0] + s[3], 23) + s[0]
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        out[i] = result


@njit(cache=True)
def _fill_uniform(s, out):
    for i in range(out.shape[0]):
        result = _rotl(s[0] + s[3], 23) + s[0]
        t = s[1] << np.uint64(17)
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        out[i] = (result >> np.uint64(11)) * _INV_2_53


class RngStream:
    """xoshiro256++ stream seeded from a 64-bit integer via splitmix64."""

    algorithm = "splitmix64+xoshiro256++"

    def __init__(self, seed):
        seed = int(seed) & MASK64
        self.seed = seed
        sm = seed
        words = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            words.append(out)
        self._s = np.array(words, dtype=np.uint64)
        self.draws = 0

    @property
    def state(self):
        return tuple(int(w) for w in self._s)

    def substream(self, index):
        """Independent child stream: seeded by splitmix64(seed ^ index)."""
        _, out = splitmix64(self.seed ^ (int(index) & MASK64))
        return RngStream(out)

    def next_u64(self, n=None):
        out = np.empty(1 if n is None else int(n), dtype=np.uint64)
        _fill_u64(self._s, out)
        self.draws += out.shape[0]
        return int(out[0]) if n is None else out

    def uniform(self, size=None, low=0.0, high=1.0):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        _fill_uniform(self._s, out)
        self.draws += n
        if low != 0.0 or high != 1.0:
            out = low + (high - low) * out
        return float(out[0]) if size is None else out.reshape(size)

    def normal(self, size=None, mean=0.0, std=1.0):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = _TWO_PI * u[1::2]
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        z = z[:n]
        if std != 1.0 or mean != 0.0:
            z = mean + std * z
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, n, size=None):
        u = self.uniform(size if size is not None else 1)
        out = np.floor(u * n).astype(np.int64)
        return int(out[0]) if size is None else out

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n), driven by n-1 uniforms."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
