"""Counter-based random streams.

Every Gaussian increment is a pure function of ``(seed, level, slot, step)``
through the Philox4x32-10 block cipher, so a path's noise does not depend on
how paths are batched or scheduled across workers.
"""
import numpy as np
from numba import njit

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_SCALE2 = 2.0 / 4294967296.0
_RETRY = np.uint64(1) << np.uint64(16)
_INV53 = 1.0 / 9007199254740992.0

# counter word 3 separates uses of the same (level, slot)
TAG_INCREMENT = 0
TAG_RESAMPLE = 1


@njit(cache=True, inline="always")
def _philox(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@njit(cache=True, fastmath=True, inline="always")
def normal_pair(k0, k1, level, slot, block, tag):
    """Two independent standard normals for counter ``(block, slot, level, tag)``.

    Marsaglia's polar method; a rejected draw moves to the next counter in the
    high half of the tag word, so the result stays a pure function of the counter.
    """
    c1_ = np.uint64(slot) & _MASK
    c2_ = np.uint64(level) & _MASK
    c0_ = np.uint64(block) & _MASK
    t = np.uint64(tag) & _MASK
    while True:
        c0, c1, c2, c3 = _philox(c0_, c1_, c2_, t, k0, k1)
        u = (np.int64(c0) + 0.5) * _SCALE2 - 1.0
        v = (np.int64(c1) + 0.5) * _SCALE2 - 1.0
        s = u * u + v * v
        if s < 1.0:
            f = np.sqrt(-2.0 * np.log(s) / s)
            return u * f, v * f
        u = (np.int64(c2) + 0.5) * _SCALE2 - 1.0
        v = (np.int64(c3) + 0.5) * _SCALE2 - 1.0
        s = u * u + v * v
        if s < 1.0:
            f = np.sqrt(-2.0 * np.log(s) / s)
            return u * f, v * f
        t = (t + _RETRY) & _MASK


@njit(cache=True)
def uniform(k0, k1, level, slot, block, tag):
    c0, c1, c2, c3 = _philox(np.uint64(block) & _MASK, np.uint64(slot) & _MASK,
                             np.uint64(level) & _MASK, np.uint64(tag) & _MASK, k0, k1)
    # 53 bits, strictly inside (0, 1)
    k = np.int64(((c0 << _S32) | c1) >> _S11)
    return (k + 0.5) * _INV53


@njit(cache=True, inline="always")
def step_normal(k0, k1, level, slot, step):
    """Standard normal consumed at simulation step ``step``; steps 2j and 2j+1 share a block."""
    z0, z1 = normal_pair(k0, k1, level, slot, step >> 1, TAG_INCREMENT)
    return z1 if step & 1 else z0


@njit(cache=True)
def fill_normals(k0, k1, level, slot, first_step, out):
    """Write the normals for steps ``first_step, first_step+1, ...`` into ``out``."""
    n = out.shape[0]
    i = 0
    step = first_step
    if step & 1 and n > 0:
        out[0] = step_normal(k0, k1, level, slot, step)
        i = 1
        step += 1
    while i + 1 < n:
        z0, z1 = normal_pair(k0, k1, level, slot, step >> 1, TAG_INCREMENT)
        out[i] = z0
        out[i + 1] = z1
        i += 2
        step += 2
    if i < n:
        out[i] = step_normal(k0, k1, level, slot, step)


def seed_key(seed):
    """Split a 64-bit seed into the two 32-bit Philox key words."""
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    # splitmix64 finalizer so nearby seeds give unrelated keys
    z = (seed + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    z ^= z >> 31
    return np.uint64(z & 0xFFFFFFFF), np.uint64(z >> 32)


class Stream:
    """Gaussian stream for one path, keyed by ``(seed, level, slot)``.

    ``normals(n, start)`` returns the standard normals that the simulation
    kernels consume for steps ``start .. start+n-1`` of this path.
    """

    def __init__(self, seed, slot=0, level=0):
        self.seed = int(seed)
        self.slot = int(slot)
        self.level = int(level)
        self.key = seed_key(seed)

    def normals(self, n, start=0):
        out = np.empty(int(n))
        fill_normals(self.key[0], self.key[1], self.level, self.slot, int(start), out)
        return out

    def __repr__(self):
        return f"Stream(seed={self.seed}, slot={self.slot}, level={self.level})"


@njit(cache=True)
def _uniform_array(k0, k1, level, slots, tag, out):
    for i in range(slots.shape[0]):
        out[i] = uniform(k0, k1, level, slots[i], 0, tag)


def uniforms(seed, level, slots, tag=TAG_RESAMPLE):
    """One uniform per slot, keyed by ``(seed, level, slot, tag)``."""
    k0, k1 = seed_key(seed)
    slots = np.ascontiguousarray(slots, dtype=np.int64)
    out = np.empty(slots.shape[0])
    _uniform_array(k0, k1, int(level), slots, int(tag), out)
    return out
