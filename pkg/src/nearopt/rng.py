"""Counter-based random numbers keyed by ``(seed, path, step)``.

Philox4x32-10 is evaluated directly on arrays of counters, so the draws for a
given path and step do not depend on how paths are batched or scheduled.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)


def philox4x32(counter, key, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function.

    ``counter`` is a ``(4, n)`` array of 32-bit words, ``key`` a pair of 32-bit
    words. Returns the ``(4, n)`` uint32 output blocks.
    """
    c = np.asarray(counter, dtype=np.uint64) & _MASK
    c0, c1, c2, c3 = c[0], c[1], c[2], c[3]
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for r in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _S32, p0 & _MASK
        hi1, lo1 = p1 >> _S32, p1 & _MASK
        c0, c1, c2, c3 = hi1 ^ c1 ^ np.uint64(k0), lo1, hi0 ^ c3 ^ np.uint64(k1), lo0
        if r < rounds - 1:
            k0 = (k0 + _W0) & 0xFFFFFFFF
            k1 = (k1 + _W1) & 0xFFFFFFFF
    return np.stack([c0, c1, c2, c3]).astype(np.uint32)


def _key(seed: int) -> tuple[int, int]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & 0xFFFFFFFF, seed >> 32


def uniforms(seed: int, paths: np.ndarray, step: int, count: int, stream: int = 0) -> np.ndarray:
    """``(len(paths), count)`` uniforms in the open interval (0, 1)."""
    paths = np.asarray(paths, dtype=np.uint64)
    n = len(paths)
    nblocks = -(-count // 4)
    out = np.empty((n, nblocks * 4))
    key = _key(seed)
    for b in range(nblocks):
        ctr = np.empty((4, n), dtype=np.uint64)
        ctr[0] = paths & _MASK
        ctr[1] = (paths >> _S32) ^ np.uint64((int(stream) & 0xFFFF) << 16)
        ctr[2] = np.uint64(int(step) & 0xFFFFFFFF)
        ctr[3] = np.uint64(b)
        words = philox4x32(ctr, key)
        out[:, 4 * b:4 * b + 4] = (words.T.astype(np.float64) + 0.5) * 2.0 ** -32
    return out[:, :count]


def normals(seed: int, paths: np.ndarray, step: int, count: int, stream: int = 0) -> np.ndarray:
    """``(len(paths), count)`` standard normals via Box-Muller on Philox uniforms."""
    pairs = -(-count // 2)
    u = uniforms(seed, paths, step, 2 * pairs, stream)
    r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
    th = 2.0 * np.pi * u[:, 1::2]
    z = np.empty((len(u), 2 * pairs))
    z[:, 0::2] = r * np.cos(th)
    z[:, 1::2] = r * np.sin(th)
    return z[:, :count]


def derive_seed(seed: int, *labels: int) -> int:
    """Deterministic 64-bit child seed for sub-tasks (e.g. ladder rungs)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(v) for v in labels]])
    return int(ss.generate_state(1, np.uint64)[0])
