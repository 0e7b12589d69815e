"""Counter-based normal variates (Philox4x32-10).

Every draw is a pure function of ``(seed, path, step, component)``, so a path
is reproduced bit-for-bit no matter how the path range is split into chunks
or handed to workers.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)

# bound on counters evaluated at once, to cap temporary memory
_CHUNK = 1 << 20


def philox4x32(counter: np.ndarray, key: tuple[int, int], rounds: int = 10) -> np.ndarray:
    """Apply the Philox4x32 bijection to an array of 128-bit counters.

    ``counter`` has shape ``(..., 4)`` holding 32-bit words (any integer dtype);
    the result has the same shape with dtype ``uint32``.
    """
    c = np.asarray(counter, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (c[..., i].copy() for i in range(4))
    k0 = np.uint64(key[0] & 0xFFFFFFFF)
    k1 = np.uint64(key[1] & 0xFFFFFFFF)
    for r in range(rounds):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def _split_seed(seed: int) -> tuple[int, int]:
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return seed & 0xFFFFFFFF, seed >> 32


def _uniform53(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    # open interval (0, 1): safe for log in Box-Muller
    a = (hi.astype(np.uint64) >> np.uint64(5)).astype(np.float64)
    b = (lo.astype(np.uint64) >> np.uint64(6)).astype(np.float64)
    return (a * 67108864.0 + b + 0.5) / 9007199254740992.0


def normals(seed: int, paths: np.ndarray, n_steps: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(paths), n_steps, dim)``.

    Entry ``[i, k, j]`` depends only on ``(seed, paths[i], k, j)``.
    """
    paths = np.asarray(paths, dtype=np.uint64)
    n = paths.shape[0]
    out = np.empty((n, n_steps, dim), dtype=np.float64)
    if n == 0 or n_steps == 0 or dim == 0:
        return out
    key = _split_seed(seed)
    n_pairs = (dim + 1) // 2
    per_path = n_steps * n_pairs
    rows = max(1, _CHUNK // per_path)
    steps = np.arange(n_steps, dtype=np.uint64)
    pairs = np.arange(n_pairs, dtype=np.uint64)
    for start in range(0, n, rows):
        p = paths[start:start + rows]
        ctr = np.empty((p.shape[0], n_steps, n_pairs, 4), dtype=np.uint64)
        ctr[..., 0] = steps[None, :, None]
        ctr[..., 1] = pairs[None, None, :]
        ctr[..., 2] = (p & _MASK32)[:, None, None]
        ctr[..., 3] = (p >> _SHIFT32)[:, None, None]
        words = philox4x32(ctr, key)
        u1 = _uniform53(words[..., 0], words[..., 1])
        u2 = _uniform53(words[..., 2], words[..., 3])
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        z = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)
        out[start:start + rows] = z.reshape(p.shape[0], n_steps, 2 * n_pairs)[..., :dim]
    return out


def derive_seed(seed: int, *labels: int) -> int:
    """Child seed for an independent job, e.g. one epsilon of a sweep."""
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=tuple(int(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
