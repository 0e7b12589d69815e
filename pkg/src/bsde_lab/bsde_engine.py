"""Backward regression Monte Carlo for BSDE(g, horizon, terminal).

The scheme walks the grid backwards.  At step k, conditional expectations
given the time-k information are least-squares projections onto a basis of
the time-k regressors (forward state or Brownian value):

    Z_k = E[(Y_{k+1} - E[Y_{k+1}|F_k]) dB_k | F_k] / dt
    Y_k = E[Y_{k+1}|F_k] + g(t_k, Y_k, Z_k) dt          (implicit in y, Picard)
    Y_k = E[Y_{k+1} + g(t_k, Y_{k+1}, Z_k) dt | F_k]    (explicit)

Stopped problems freeze Y at the payoff and set Z = 0 from the stopping
index on.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .core import ATOL, GeneratorSpec, TimeGrid
from .sde_engine import (KIND_SOLUTION, PathBundle, StoppingTimeField, _HEADER, _read_header,
                         _write)


class SolverError(RuntimeError):
    pass


class SingularRegressionError(SolverError):
    def __init__(self, condition: float, step: int):
        super().__init__(f"regression matrix numerically singular at step {step} "
                         f"(condition number {condition:.3e})")
        self.condition = condition
        self.step = step


class PicardDivergenceError(SolverError):
    def __init__(self, history: list[float], step: int):
        super().__init__(f"Picard iteration did not converge at step {step}; "
                         f"residuals {history[-5:]}")
        self.history = history
        self.step = step


@dataclass(frozen=True)
class SolverConfig:
    basis: str = "polynomial"          # or "piecewise"
    degree: int = 3
    bins: int = 32
    regress_on: str = "auto"           # "state", "brownian" or "auto"
    picard_max: int = 50
    picard_tol: float = 1e-12
    z_clip: float | None = None        # None -> 10 / gamma
    scheme: str = "implicit_y"         # or "explicit"
    cond_max: float = 1e10

    def __post_init__(self):
        if self.basis not in ("polynomial", "piecewise"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.scheme not in ("implicit_y", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.regress_on not in ("auto", "state", "brownian"):
            raise ValueError(f"unknown regressor {self.regress_on!r}")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be > 0")
        if self.z_clip is not None and not (0 < self.z_clip < math.inf):
            raise ValueError("z_clip must be finite and positive")
        if self.degree < 0 or self.bins < 1 or self.picard_max < 1:
            raise ValueError("degree >= 0, bins >= 1 and picard_max >= 1 required")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class SolverDiagnostics:
    picard_iterations: int = 0
    picard_residual: float = 0.0
    regression_condition: float = 1.0
    clipped_fraction: float = 0.0
    picard_history: list[float] = field(default_factory=list)


@dataclass
class BsdeSolution:
    grid: TimeGrid
    Y: np.ndarray            # (n_paths, n_steps + 1)
    Z: np.ndarray            # (n_paths, n_steps, d)
    diagnostics: SolverDiagnostics
    terminal: np.ndarray     # (n_paths,)
    tau_index: np.ndarray    # (n_paths,)
    y0_paths: np.ndarray     # per-path xi + sum g dt - sum Z.dB

    @property
    def y0(self) -> float:
        """Value at the first grid point from the backward recursion."""
        return float(np.mean(self.Y[:, 0]))

    def y0_estimate(self) -> tuple[float, float]:
        """Martingale-corrected estimate of Y at the first grid point and its standard error.

        Subtracting the discrete stochastic integral of Z removes most of the
        sampling noise of the terminal payoff.
        """
        v = self.y0_paths
        se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return float(np.mean(v)), se

    def z_energy(self) -> np.ndarray:
        """Per-path sum_k |Z_k|^2 dt."""
        return np.sum(self.Z ** 2, axis=(1, 2)) * self.grid.dt


class _Projector:
    """Least-squares projection onto a basis of the step-k regressors."""

    def __init__(self, feats: np.ndarray, cfg: SolverConfig, step: int):
        n = feats.shape[0]
        mean = feats.mean(axis=0)
        std = feats.std(axis=0)
        keep = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.kind = cfg.basis
        self.condition = 1.0
        if not keep.any() or n < 2:
            self.kind = "constant"
            return
        u = (feats[:, keep] - mean[keep]) / std[keep]
        if cfg.basis == "piecewise":
            v = u[:, 0]
            edges = np.quantile(v, np.linspace(0.0, 1.0, cfg.bins + 1)[1:-1])
            self.idx = np.searchsorted(edges, v, side="right")
            self.counts = np.bincount(self.idx, minlength=cfg.bins)
            nz = self.counts[self.counts > 0]
            self.condition = float(nz.max() / nz.min())
            return
        cols = [np.ones(n)]
        for deg in range(1, cfg.degree + 1):
            for combo in itertools.combinations_with_replacement(range(u.shape[1]), deg):
                cols.append(np.prod(u[:, combo], axis=1))
        A = np.column_stack(cols)
        self.Q, R = np.linalg.qr(A)
        sv = np.linalg.svd(R, compute_uv=False)
        self.condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
        if not self.condition <= cfg.cond_max:
            raise SingularRegressionError(self.condition, step)

    def __call__(self, target: np.ndarray) -> np.ndarray:
        t2 = target.reshape(target.shape[0], -1)
        if self.kind == "constant":
            out = np.broadcast_to(t2.mean(axis=0), t2.shape).copy()
        elif self.kind == "piecewise":
            sums = np.stack([np.bincount(self.idx, weights=t2[:, j], minlength=self.counts.size)
                             for j in range(t2.shape[1])], axis=1)
            means = sums / np.maximum(self.counts, 1)[:, None]
            out = means[self.idx]
        else:
            out = self.Q @ (self.Q.T @ t2)
        return out.reshape(target.shape)


def _regressors(paths: PathBundle, cfg: SolverConfig) -> np.ndarray:
    if cfg.regress_on == "state" or (cfg.regress_on == "auto" and paths.state is not None):
        if paths.state is None:
            raise ValueError("state regression requested but bundle has no state paths")
        return paths.state
    return paths.brownian


def solve_bsde(gen: GeneratorSpec, terminal, paths: PathBundle,
               stop: StoppingTimeField | None = None,
               cfg: SolverConfig | None = None) -> BsdeSolution:
    """Solve BSDE(g, grid end (or tau), terminal) on ``paths``.

    ``terminal`` is a per-path array or a callable ``terminal(paths, stop_index)``.
    """
    cfg = cfg or SolverConfig()
    grid = paths.grid
    n, N, d = paths.n_paths, grid.n_steps, paths.dim_w
    if d != gen.dim_z:
        raise ValueError(f"generator expects z of dimension {gen.dim_z}, paths have d={d}")
    tau = np.full(n, N, dtype=np.int64) if stop is None else np.asarray(stop.tau_index)
    if tau.shape != (n,) or tau.min(initial=0) < 0 or tau.max(initial=0) > N:
        raise ValueError("stopping field does not match the path bundle")
    xi = np.asarray(terminal(paths, tau) if callable(terminal) else terminal, dtype=float)
    if xi.shape != (n,) or not np.all(np.isfinite(xi)):
        raise ValueError("terminal must be a finite per-path array")

    dt = grid.dt
    pts = grid.points
    feats_all = _regressors(paths, cfg)
    dB = paths.increments
    z_clip = cfg.z_clip if cfg.z_clip is not None else 10.0 / gen.gamma
    Y = np.repeat(xi[:, None], N + 1, axis=1)
    Z = np.zeros((n, N, d))
    G = np.zeros((n, N))
    diag = SolverDiagnostics()
    n_eval = n_clipped = 0

    for k in range(N - 1, -1, -1):
        rows = np.nonzero(tau > k)[0]
        if rows.size == 0:
            continue
        proj = _Projector(feats_all[rows, k], cfg, k)
        diag.regression_condition = max(diag.regression_condition, proj.condition)
        y_next = Y[rows, k + 1]
        y_hat = proj(y_next)
        dBk = dB[rows, k]
        zk = proj((y_next - y_hat)[:, None] * dBk) / dt
        znorm = np.linalg.norm(zk, axis=1)
        over = znorm > z_clip
        n_eval += rows.size
        n_clipped += int(over.sum())
        zg = zk * np.where(over, z_clip / np.where(over, znorm, 1.0), 1.0)[:, None]
        om = paths.brownian[rows, k]

        if cfg.scheme == "implicit_y":
            y = y_hat
            history = []
            for _ in range(cfg.picard_max):
                gk = gen(pts[k], y, zg, om)
                y_new = y_hat + gk * dt
                res = float(np.max(np.abs(y_new - y)))
                history.append(res)
                y = y_new
                if not math.isfinite(res):
                    raise PicardDivergenceError(history, k)
                if res < cfg.picard_tol * max(1.0, float(np.max(np.abs(y)))):
                    break
            else:
                raise PicardDivergenceError(history, k)
            if len(history) > diag.picard_iterations:
                diag.picard_iterations = len(history)
                diag.picard_history = history
            diag.picard_residual = max(diag.picard_residual, history[-1])
        else:
            gk = gen(pts[k], y_next, zg, om)
            y = proj(y_next + gk * dt)

        Y[rows, k] = y
        Z[rows, k] = zk
        G[rows, k] = gk

    if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(Z))):
        raise SolverError("non-finite values in the solution")
    diag.clipped_fraction = n_clipped / n_eval if n_eval else 0.0
    y0_paths = xi + G.sum(axis=1) * dt - np.einsum("nkd,nkd->n", Z, dB)
    return BsdeSolution(grid=grid, Y=Y, Z=Z, diagnostics=diag, terminal=xi,
                        tau_index=tau, y0_paths=y0_paths)


# --------------------------------------------------------------------------
# closed-form oracles


def oracle_linear(beta: float, c: float, h: float) -> float:
    """Y_0 for g = -beta*y with constant terminal c over horizon h."""
    if h < 0:
        raise ValueError("horizon must be >= 0")
    return c * math.exp(-beta * h)


def oracle_cole_hopf(gamma: float, xi, groups=None):
    """(1/gamma) log mean exp(gamma xi) with a delta-method standard error.

    Exact for g = (gamma/2)|z|^2.  With ``groups`` (one label per sample, e.g.
    the index of a conditioning state) the estimate is returned per group as
    two arrays ordered by sorted label.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("terminal samples must be finite")
    if groups is not None:
        labels = np.unique(groups)
        res = [oracle_cole_hopf(gamma, xi[np.asarray(groups) == g]) for g in labels]
        return np.array([r[0] for r in res]), np.array([r[1] for r in res])
    s = gamma * xi
    shift = float(np.max(s))
    w = np.exp(s - shift)
    m = float(np.mean(w))
    est = (shift + math.log(m)) / gamma
    se = float(np.std(w, ddof=1) / (math.sqrt(w.size) * gamma * m)) if w.size > 1 else 0.0
    return est, se


# --------------------------------------------------------------------------
# a-priori bound checks


@dataclass(frozen=True)
class BoundReport:
    name: str
    applicable: bool
    passed: bool
    bound: float
    observed: float
    margin: float          # bound / observed
    label: str = "empirical essential sup"

    def row(self) -> dict[str, Any]:
        return {"check": self.name, "applicable": self.applicable, "passed": self.passed,
                "bound": self.bound, "observed": self.observed, "margin": self.margin,
                "label": self.label}


def _bound_report(name: str, bound: float, observed: float, slack: float) -> BoundReport:
    margin = bound / observed if observed > 0 else math.inf
    passed = observed <= bound * (1.0 + slack) + ATOL
    return BoundReport(name, True, bool(passed), float(bound), float(observed), float(margin))


def check_bound_global(sol: BsdeSolution, gen: GeneratorSpec, xi=None,
                       slack: float = 1e-3) -> BoundReport:
    """sup|Y| <= e^{beta T} (||xi||_inf + ||int_0^T alpha||_inf)."""
    horizon = sol.grid.length
    ib = gen.alpha.integral_bound(horizon)
    xi = sol.terminal if xi is None else np.asarray(xi, dtype=float)
    observed = float(np.max(np.abs(sol.Y)))
    if ib is None:
        return BoundReport("global", False, False, math.nan, observed, math.nan)
    bound = math.exp(gen.beta * horizon) * (float(np.max(np.abs(xi))) + ib)
    return _bound_report("global", bound, observed, slack)


def check_bound_small_horizon(sol: BsdeSolution, gen: GeneratorSpec, eps: float | None = None,
                              which: str = "auto", slack: float = 1e-3) -> BoundReport:
    """Short-horizon bound for a zero-terminal solution on [t, t+eps].

    ``which="sup"`` uses eps e^{beta eps} ||alpha||_inf, ``"integral"`` uses
    e^{beta eps} ||int alpha||_inf; ``"auto"`` prefers the former.
    """
    if np.any(sol.terminal != 0.0):
        raise ValueError("small-horizon bound needs a zero terminal value")
    eps = sol.grid.length if eps is None else eps
    observed = float(np.max(np.abs(sol.Y)))
    growth = math.exp(gen.beta * eps)
    if which == "auto":
        which = "sup" if gen.alpha.sup_bound is not None else "integral"
    if which == "sup":
        if gen.alpha.sup_bound is None:
            return BoundReport("small_horizon_sup", False, False, math.nan, observed, math.nan)
        return _bound_report("small_horizon_sup", eps * growth * gen.alpha.sup_bound, observed, slack)
    ib = gen.alpha.integral_bound(eps)
    if ib is None:
        return BoundReport("small_horizon_integral", False, False, math.nan, observed, math.nan)
    return _bound_report("small_horizon_integral", growth * ib, observed, slack)


@dataclass(frozen=True)
class SmallHorizonSweep:
    reports: tuple[BoundReport, ...]
    epsilons: tuple[float, ...]
    decreasing: bool

    @property
    def passed(self) -> bool:
        return self.decreasing and all(r.passed for r in self.reports if r.applicable)


def small_horizon_sweep(gen: GeneratorSpec, epsilons, make_paths: Callable[[float], PathBundle],
                        cfg: SolverConfig | None = None, slack: float = 1e-3) -> SmallHorizonSweep:
    """Re-solve the zero-terminal problem per eps; sups must shrink with eps."""
    epsilons = tuple(sorted((float(e) for e in epsilons), reverse=True))
    reports = []
    for eps in epsilons:
        paths = make_paths(eps)
        sol = solve_bsde(gen, np.zeros(paths.n_paths), paths, None, cfg)
        reports.append(check_bound_small_horizon(sol, gen, eps, slack=slack))
    obs = [r.observed for r in reports]
    decreasing = all(b <= a + ATOL for a, b in zip(obs, obs[1:]))
    return SmallHorizonSweep(tuple(reports), epsilons, decreasing)


# --------------------------------------------------------------------------
# export


def write_solution(path: str | Path, sol: BsdeSolution, seed: int = 0) -> None:
    """Same column format as path bundles: Y (n x (N+1)) then Z (n x N x d)."""
    n, d = sol.Y.shape[0], sol.Z.shape[2]
    _write(path, KIND_SOLUTION, n, sol.grid, d, 1, seed, [sol.Y, sol.Z])


def read_solution_arrays(path: str | Path) -> tuple[TimeGrid, np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    kind, n, steps, d, _, _, grid = _read_header(buf)
    if kind != KIND_SOLUTION:
        raise ValueError("file holds paths, not a solution")
    off = _HEADER.size
    Y = np.frombuffer(buf, "<f8", n * (steps + 1), off).reshape(n, steps + 1).copy()
    Z = np.frombuffer(buf, "<f8", n * steps * d, off + 8 * Y.size).reshape(n, steps, d).copy()
    return grid, Y, Z
