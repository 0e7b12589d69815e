"""Brownian paths, Euler-Maruyama for the forward SDE, and discrete exit times."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import rng
from .core import SdeCoefficients, TimeGrid

MAGIC = b"BSDELAB\x00"
FORMAT_VERSION = 1
KIND_PATHS = 0
KIND_SOLUTION = 1
# magic, version, kind, n_paths, n_steps, d, m, seed, t_start, t_end
_HEADER = struct.Struct("<8sIIQQIIQdd")


@dataclass(frozen=True)
class PathBundle:
    """Brownian (and optionally state) paths sampled on a shared grid.

    ``brownian`` has shape ``(n_paths, n_steps + 1, d)``; ``state`` has shape
    ``(n_paths, n_steps + 1, m)`` once filled by :func:`euler_maruyama`.
    """

    grid: TimeGrid
    brownian: np.ndarray
    seed: int
    state: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.brownian.shape[0]

    @property
    def dim_w(self) -> int:
        return self.brownian.shape[2]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.brownian, axis=1)

    def subset(self, rows) -> PathBundle:
        return replace(self, brownian=self.brownian[rows],
                       state=None if self.state is None else self.state[rows])


@dataclass(frozen=True)
class StoppingTimeField:
    """Per-path first grid index with |X| > C0, capped at the horizon."""

    tau_index: np.ndarray
    tau_value: np.ndarray
    threshold: float
    hit: np.ndarray

    @property
    def hit_fraction(self) -> float:
        return float(np.mean(self.hit)) if self.hit.size else 0.0


def simulate_brownian(grid: TimeGrid, n_paths: int, d: int, seed: int,
                      start=None, path_offset: int = 0) -> PathBundle:
    """Brownian paths on ``grid``; path ``p`` depends only on ``(seed, path_offset + p)``.

    ``start`` is the value of B at ``grid.t_start`` (zero by default), either
    one ``d``-vector for all paths or an array of shape ``(n_paths, d)``.
    """
    if n_paths < 1 or d < 1:
        raise ValueError("n_paths and d must be positive")
    ids = np.arange(path_offset, path_offset + n_paths, dtype=np.uint64)
    dB = np.sqrt(grid.dt) * rng.normals(seed, ids, grid.n_steps, d)
    B = np.zeros((n_paths, grid.n_steps + 1, d))
    np.cumsum(dB, axis=1, out=B[:, 1:])
    if start is not None:
        B += np.broadcast_to(np.asarray(start, dtype=float), (n_paths, d))[:, None, :]
    return PathBundle(grid=grid, brownian=B, seed=int(seed))


def euler_maruyama(coeffs: SdeCoefficients, t: float, x, grid: TimeGrid,
                   bundle: PathBundle) -> PathBundle:
    """Fill ``bundle.state`` with X[k+1] = X[k] + b dt + sigma dB started at X[0] = x."""
    if not np.isclose(grid.t_start, t):
        raise ValueError(f"grid starts at {grid.t_start}, SDE starts at {t}")
    if bundle.grid != grid:
        raise ValueError("bundle grid differs from the requested grid")
    if bundle.dim_w != coeffs.dim_w:
        raise ValueError(f"sigma has {coeffs.dim_w} noise columns, bundle has d={bundle.dim_w}")
    x = np.broadcast_to(np.asarray(x, dtype=float), (coeffs.dim_x,))
    n, dt = bundle.n_paths, grid.dt
    X = np.empty((n, grid.n_steps + 1, coeffs.dim_x))
    X[:, 0] = x
    dB = bundle.increments
    pts = grid.points
    for k in range(grid.n_steps):
        xk = X[:, k]
        s = coeffs.diffusion(pts[k], xk)
        X[:, k + 1] = xk + coeffs.drift(pts[k], xk) * dt + np.einsum("nmd,nd->nm", s, dB[:, k])
    return replace(bundle, state=X)


def hitting_time(state: np.ndarray, x, C0: float, grid: TimeGrid,
                 horizon: float | None = None) -> StoppingTimeField:
    """tau = first grid time with |X| > C0 (Euclidean norm), capped at the horizon.

    ``horizon`` is measured from ``grid.t_start`` and defaults to the grid
    length; the cap index is the last grid point not beyond it.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not C0 > np.linalg.norm(x):
        raise ValueError(f"threshold C0={C0} must exceed |x|={np.linalg.norm(x)}")
    horizon = grid.length if horizon is None else float(horizon)
    rel = grid.points - grid.t_start
    cap = int(np.searchsorted(rel, horizon * (1 + 1e-12), side="right")) - 1
    cap = min(max(cap, 0), grid.n_steps)
    norms = np.linalg.norm(state[:, :cap + 1], axis=2)
    outside = norms > C0
    hit = outside.any(axis=1)
    first = np.where(hit, np.argmax(outside, axis=1), cap)
    value = np.minimum(rel[first], horizon)
    return StoppingTimeField(tau_index=first.astype(np.int64), tau_value=value, threshold=float(C0),
                             hit=hit)


# --------------------------------------------------------------------------
# binary column export


def _write(path, kind: int, n_paths: int, grid: TimeGrid, d: int, m: int, seed: int,
           arrays: list[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, kind, n_paths, grid.n_steps, d, m,
                              int(seed) & 0xFFFFFFFFFFFFFFFF, grid.t_start, grid.t_end))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_header(buf: bytes):
    magic, version, kind, n, steps, d, m, seed, t0, t1 = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError("not a bsde_lab column file")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    return kind, n, steps, d, m, seed, TimeGrid(t0, t1, steps)


def write_bundle(path: str | Path, bundle: PathBundle) -> None:
    """Little-endian header then float64 payload, path-major: B, then X if present."""
    m = 0 if bundle.state is None else bundle.state.shape[2]
    arrays = [bundle.brownian] + ([] if bundle.state is None else [bundle.state])
    _write(path, KIND_PATHS, bundle.n_paths, bundle.grid, bundle.dim_w, m, bundle.seed, arrays)


def read_bundle(path: str | Path) -> PathBundle:
    buf = Path(path).read_bytes()
    kind, n, steps, d, m, seed, grid = _read_header(buf)
    if kind != KIND_PATHS:
        raise ValueError("file holds a solution, not paths")
    off = _HEADER.size
    size = n * (steps + 1) * d
    B = np.frombuffer(buf, "<f8", size, off).reshape(n, steps + 1, d).copy()
    state = None
    if m:
        off += 8 * size
        state = np.frombuffer(buf, "<f8", n * (steps + 1) * m, off).reshape(n, steps + 1, m).copy()
    return PathBundle(grid=grid, brownian=B, seed=seed, state=state)
