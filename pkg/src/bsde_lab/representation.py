"""Difference quotients of short-horizon BSDEs and their limits.

For an anchor (t, x, y, q) and a small eps, the BSDE with driver g on
[t, t + eps ^ tau] and terminal y + q.(X_{t+eps^tau} - x) has a value Y_t
whose quotient (Y_t - y)/eps tends to g(t, y, sigma*(t,x) q) + q.b(t,x).
The sweep estimates that limit from a decreasing eps schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import rng
from .bsde_engine import SolverConfig, solve_bsde
from .core import ATOL, GeneratorSpec, SdeCoefficients, TimeGrid
from .parallel import ordered_map
from .presets import Terminal, brownian
from .sde_engine import euler_maruyama, hitting_time, simulate_brownian

RTOL_LIMIT = 0.05
ATOL_LIMIT = 0.01
MODES = ("L1", "Lp", "pathwise")


def default_schedule(horizon: float = 1.0, t: float = 0.0) -> tuple[float, ...]:
    return tuple((horizon - t) * 2.0 ** -k for k in range(2, 8))


@dataclass(frozen=True)
class RepresentationTask:
    gen: GeneratorSpec
    coeffs: SdeCoefficients
    t: float = 0.0
    x: tuple[float, ...] = (0.0,)
    y: float = 0.0
    q: tuple[float, ...] = (1.0,)
    C0: float = 5.0
    epsilon_schedule: tuple[float, ...] = field(default_factory=default_schedule)
    mode: str = "L1"
    p: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)
    n_paths: int = 100_000
    seed: int = 0
    n_steps: int = 64
    n_batches: int = 32
    horizon: float = 1.0
    n_conditioning: int = 5

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "q", tuple(float(v) for v in np.atleast_1d(self.q)))
        object.__setattr__(self, "epsilon_schedule", tuple(float(e) for e in self.epsilon_schedule))
        if len(self.x) != self.coeffs.dim_x or len(self.q) != self.coeffs.dim_x:
            raise ValueError("x and q must have the state dimension")
        if self.coeffs.dim_w != self.gen.dim_z:
            raise ValueError("noise dimension of the SDE must match the generator's z dimension")
        if not self.C0 > np.linalg.norm(self.x):
            raise ValueError("C0 must exceed |x|")
        eps = self.epsilon_schedule
        if not eps:
            raise ValueError("epsilon schedule must be non-empty")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon schedule must be strictly decreasing")
        if eps[-1] <= 0 or eps[0] > self.horizon - self.t + 1e-12:
            raise ValueError("epsilon values must lie in (0, T - t]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.p > 0:
            raise ValueError("p must be > 0")
        if self.n_batches < 1 or self.n_paths < self.n_batches:
            raise ValueError("need at least one path per batch")

    def to_dict(self) -> dict[str, Any]:
        return {"generator": self.gen.to_dict(), "coefficients": self.coeffs.to_dict(),
                "t": self.t, "x": list(self.x), "y": self.y, "q": list(self.q), "C0": self.C0,
                "epsilon_schedule": list(self.epsilon_schedule), "mode": self.mode, "p": self.p,
                "solver": self.solver.to_dict(), "n_paths": self.n_paths, "seed": self.seed,
                "n_steps": self.n_steps, "n_batches": self.n_batches, "horizon": self.horizon,
                "n_conditioning": self.n_conditioning}


def brownian_specialization(gen: GeneratorSpec, y: float, z, **kwargs) -> RepresentationTask:
    """b = 0, sigma = identity, x = 0, q = z: the quotient recovers g(t, y, z) itself."""
    z = tuple(float(v) for v in np.atleast_1d(z))
    return RepresentationTask(gen=gen, coeffs=brownian(len(z)), x=(0.0,) * len(z), y=y, q=z,
                              **kwargs)


def target_value(task: RepresentationTask, omega=None) -> float:
    """g(t, y, sigma*(t,x) q) + q.b(t,x), evaluated exactly at the anchor."""
    x = np.asarray(task.x)[None, :]
    q = np.asarray(task.q)
    s = task.coeffs.diffusion(task.t, x)[0]
    om = None if omega is None else np.asarray(omega, dtype=float).reshape(1, -1)
    g = task.gen(task.t, np.array([task.y]), (s.T @ q)[None, :], om)[0]
    return float(g + q @ task.coeffs.drift(task.t, x)[0])


def conditioning_nodes(task: RepresentationTask) -> tuple[np.ndarray, np.ndarray]:
    """Brownian values at the anchor time with quadrature weights.

    At t = 0 the information is trivial (one node at the origin); for t > 0
    Gauss-Hermite nodes of N(0, t I) stand in for the conditioning states.
    """
    d = task.gen.dim_z
    if task.t == 0:
        return np.zeros((1, d)), np.ones(1)
    nodes, weights = np.polynomial.hermite_e.hermegauss(task.n_conditioning)
    weights = weights / weights.sum()
    grids = np.meshgrid(*([nodes] * d), indexing="ij")
    wgrid = np.meshgrid(*([weights] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1) * math.sqrt(task.t)
    w = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1)
    return pts, w


@dataclass(frozen=True)
class QuotientResult:
    eps: float
    estimate: float
    stderr: float
    target: float
    abs_error: float
    error_stderr: float
    node_estimates: tuple[float, ...]
    node_stderrs: tuple[float, ...]
    node_targets: tuple[float, ...]
    hit_fraction: float


def _norm_error(e: np.ndarray, w: np.ndarray, mode: str, p: float) -> float:
    if mode == "pathwise":
        return float(np.max(e))
    if mode == "L1":
        return float(np.sum(w * e))
    return float(np.sum(w * e ** p) ** min(1.0 / p, 1.0))


def _node_quotient(task: RepresentationTask, eps: float, seed: int, start: np.ndarray,
                   gen: GeneratorSpec | None = None) -> tuple[float, float, float]:
    gen = gen or task.gen
    grid = TimeGrid(task.t, task.t + eps, task.n_steps)
    nb = task.n_paths // task.n_batches
    terminal = Terminal("state_linear", {"y": task.y, "q": list(task.q), "x": list(task.x)})
    values, hits = [], []
    for j in range(task.n_batches):
        bundle = simulate_brownian(grid, nb, gen.dim_z, seed, start=start, path_offset=j * nb)
        bundle = euler_maruyama(task.coeffs, task.t, task.x, grid, bundle)
        stop = hitting_time(bundle.state, task.x, task.C0, grid)
        sol = solve_bsde(gen, terminal, bundle, stop, task.solver)
        y0, se0 = sol.y0_estimate()
        values.append((y0 - task.y) / eps)
        hits.append(stop.hit_fraction)
    v = np.asarray(values)
    if v.size > 1:
        se = float(np.std(v, ddof=1) / math.sqrt(v.size))
    else:
        se = se0 / eps
    return float(v.mean()), se, float(np.mean(hits))


def difference_quotient(task: RepresentationTask, eps: float, eps_index: int = 0,
                        gen: GeneratorSpec | None = None) -> QuotientResult:
    """Monte Carlo estimate of (Y_t - y)/eps on the stopped interval [t, t + eps ^ tau].

    Batches of paths are solved independently; the standard error is the
    spread of the batch estimates, so it includes regression noise.
    """
    if not 0 < eps <= task.horizon - task.t + 1e-12:
        raise ValueError(f"eps={eps} outside (0, T - t]")
    gen = gen or task.gen
    seed = rng.derive_seed(task.seed, eps_index)
    nodes, w = conditioning_nodes(task)
    est, ses, targets, hits = [], [], [], []
    for node in nodes:
        m, s, h = _node_quotient(task, eps, seed, node, gen)
        est.append(m)
        ses.append(s)
        hits.append(h)
        targets.append(target_value(replace(task, gen=gen), node if task.t > 0 else None))
    est_a, se_a, tg_a = map(np.asarray, (est, ses, targets))
    e = np.abs(est_a - tg_a)
    err = _norm_error(e, w, task.mode, task.p)
    err_se = abs(_norm_error(e + se_a, w, task.mode, task.p) - err)
    return QuotientResult(eps=float(eps), estimate=float(w @ est_a),
                          stderr=float(math.sqrt(np.sum((w * se_a) ** 2))),
                          target=float(w @ tg_a), abs_error=err, error_stderr=err_se,
                          node_estimates=tuple(est), node_stderrs=tuple(ses),
                          node_targets=tuple(targets), hit_fraction=float(np.mean(hits)))


@dataclass(frozen=True)
class ConvergenceReport:
    target: float
    rows: tuple[QuotientResult, ...]
    fitted_limit: float
    fitted_limit_stderr: float
    fitted_rate: float
    n_reliable: int
    monotone: bool
    verdict: str               # "pass", "fail" or "inconclusive"
    config: dict[str, Any] = field(default_factory=dict)

    columns = ("eps", "estimate", "stderr", "abs_error", "target", "error_stderr", "reliable")

    def csv_rows(self) -> list[dict[str, Any]]:
        return [{"eps": r.eps, "estimate": r.estimate, "stderr": r.stderr,
                 "abs_error": r.abs_error, "target": r.target, "error_stderr": r.error_stderr,
                 "reliable": r.abs_error > 3.0 * r.error_stderr} for r in self.rows]

    def summary(self) -> dict[str, Any]:
        return {"target": self.target, "fitted_limit": self.fitted_limit,
                "fitted_limit_stderr": self.fitted_limit_stderr, "fitted_rate": self.fitted_rate,
                "n_reliable": self.n_reliable, "monotone": self.monotone, "verdict": self.verdict}


def richardson(eps_a: float, d_a: float, eps_b: float, d_b: float) -> float:
    """First-order Richardson limit from D(eps_a), D(eps_b) with eps_a > eps_b."""
    r = eps_a / eps_b
    return (r * d_b - d_a) / (r - 1.0)


def assemble_report(rows: list[QuotientResult], config: dict[str, Any] | None = None,
                    rtol: float = RTOL_LIMIT, atol: float = ATOL_LIMIT) -> ConvergenceReport:
    """Fit the error decay, extrapolate the limit, and decide the verdict."""
    rows = sorted(rows, key=lambda r: -r.eps)
    target = rows[0].target
    err = np.array([r.abs_error for r in rows])
    err_se = np.array([r.error_stderr for r in rows])
    est = np.array([r.estimate for r in rows])
    se = np.array([r.stderr for r in rows])
    eps = np.array([r.eps for r in rows])
    reliable = (err > 3.0 * err_se) & (err > ATOL)
    idx = np.nonzero(reliable)[0]

    rate = math.nan
    if idx.size >= 2:
        rate = float(np.polyfit(np.log(eps[idx]), np.log(err[idx]), 1)[0])
    if idx.size >= 2 and rate >= 0.5:
        a, b = idx[-2], idx[-1]
        r = eps[a] / eps[b]
        limit = richardson(eps[a], est[a], eps[b], est[b])
        limit_se = math.sqrt((r * se[b]) ** 2 + se[a] ** 2) / (r - 1.0)
    elif idx.size >= 2:
        limit, limit_se = float(est[-1]), float(se[-1])
    else:
        floor = ~reliable if (~reliable).any() else np.ones_like(reliable)
        wts = 1.0 / np.maximum(se[floor] ** 2, 1e-300)
        limit = float(np.sum(wts * est[floor]) / np.sum(wts))
        limit_se = float(1.0 / math.sqrt(np.sum(wts))) if np.all(se[floor] > 0) else 0.0

    jumps = np.sqrt(err_se[:-1] ** 2 + err_se[1:] ** 2)
    monotone = bool(np.all(err[1:] <= err[:-1] + 2.0 * jumps + ATOL))
    tol = max(rtol * abs(target), atol)
    if len(rows) < 2 or limit_se > tol:
        verdict = "inconclusive"
    elif abs(limit - target) < tol and monotone:
        verdict = "pass"
    else:
        verdict = "fail"
    return ConvergenceReport(target=target, rows=tuple(rows), fitted_limit=float(limit),
                             fitted_limit_stderr=float(limit_se), fitted_rate=rate,
                             n_reliable=int(idx.size), monotone=monotone, verdict=verdict,
                             config=config or {})


def epsilon_sweep(task: RepresentationTask, gen: GeneratorSpec | None = None) -> ConvergenceReport:
    """Run the quotient for every eps (independent sub-seeds) and fit the limit."""
    jobs = list(enumerate(task.epsilon_schedule))
    rows = ordered_map(lambda job: difference_quotient(task, job[1], job[0], gen), jobs)
    cfg = task.to_dict()
    if gen is not None:
        cfg["generator"] = gen.to_dict()
    return assemble_report(rows, cfg)


def lp_sweep(task: RepresentationTask, p: float | None = None) -> ConvergenceReport:
    """Sweep with the empirical L^p error (E|D - target|^p)^{(1/p) ^ 1}; needs bounded alpha."""
    if not task.gen.alpha.bounded:
        raise ValueError("L^p representation requires a bounded alpha (sup_bound)")
    return epsilon_sweep(replace(task, mode="Lp", p=task.p if p is None else float(p)))


# --------------------------------------------------------------------------
# Z energy


@dataclass(frozen=True)
class DecayReport:
    rows: tuple[tuple[float, float, float], ...]    # (eps, energy, stderr)
    strictly_decreasing: bool
    verdict: str
    config: dict[str, Any] = field(default_factory=dict)

    columns = ("eps", "energy", "stderr")

    def csv_rows(self) -> list[dict[str, Any]]:
        return [{"eps": e, "energy": v, "stderr": s} for e, v, s in self.rows]


def z_energy_decay(gen: GeneratorSpec, coeffs: SdeCoefficients, epsilons, t: float = 0.0,
                   x=0.0, C0: float = 5.0, solver: SolverConfig | None = None,
                   n_paths: int = 20_000, seed: int = 0, n_steps: int = 64,
                   atol_energy: float = 1e-2, ratio: float = 0.2) -> DecayReport:
    """(1/eps) E[sum |Z_k|^2 dt] for BSDE(g, t + eps ^ tau, 0) along a decreasing schedule."""
    if not gen.alpha.satisfies_b:
        raise ValueError("alpha must satisfy the uniform-integrability assumption")
    x = np.broadcast_to(np.asarray(x, dtype=float), (coeffs.dim_x,))
    epsilons = tuple(sorted((float(e) for e in epsilons), reverse=True))

    def job(item):
        i, eps = item
        grid = TimeGrid(t, t + eps, n_steps)
        bundle = simulate_brownian(grid, n_paths, coeffs.dim_w, rng.derive_seed(seed, i))
        bundle = euler_maruyama(coeffs, t, x, grid, bundle)
        stop = hitting_time(bundle.state, x, C0, grid)
        sol = solve_bsde(gen, np.zeros(n_paths), bundle, stop, solver)
        e = sol.z_energy() / eps
        return eps, float(e.mean()), float(e.std(ddof=1) / math.sqrt(n_paths))

    rows = tuple(ordered_map(job, list(enumerate(epsilons))))
    energy = [r[1] for r in rows]
    decreasing = all(b < a for a, b in zip(energy, energy[1:]))
    ok = energy[-1] <= ratio * energy[0] and energy[-1] < atol_energy
    config = {"generator": gen.to_dict(), "coefficients": coeffs.to_dict(), "t": t,
              "x": x.tolist(), "C0": C0, "epsilons": list(epsilons),
              "solver": (solver or SolverConfig()).to_dict(), "n_paths": n_paths, "seed": seed,
              "n_steps": n_steps, "atol_energy": atol_energy, "ratio": ratio}
    return DecayReport(rows, decreasing, "pass" if ok else "fail", config)
