"""Ordering of solutions versus ordering of generators.

``solution_order_check`` compares two solves on one path bundle.
``converse_compare`` first checks the ordering hypothesis on the terminal
family y + z.(B_{t+eps^tau} - B_t), then compares the limits of the
difference quotients for both generators probe by probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from . import rng
from .bsde_engine import SolverConfig, solve_bsde
from .core import GeneratorSpec, TimeGrid
from .parallel import ordered_map
from .presets import Terminal, brownian
from .representation import RepresentationTask, brownian_specialization, epsilon_sweep
from .sde_engine import PathBundle, StoppingTimeField, euler_maruyama, hitting_time, \
    simulate_brownian

ORDER_TOL = 1e-6
LIMIT_TOL_FLOOR = 1e-2


@dataclass(frozen=True)
class OrderRow:
    terminal: str
    min_diff: float
    max_diff: float
    y0_1: float
    y0_2: float


@dataclass(frozen=True)
class OrderReport:
    """min and max over paths and times of Y1 - Y2, one row per terminal."""

    rows: tuple[OrderRow, ...]
    tol: float
    config: dict[str, Any] = field(default_factory=dict)

    columns = ("terminal", "min_diff", "max_diff", "y0_1", "y0_2")

    @property
    def min_diff(self) -> float:
        return min(r.min_diff for r in self.rows) if self.rows else 0.0

    @property
    def passed(self) -> bool:
        return self.min_diff >= -self.tol

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def csv_rows(self) -> list[dict[str, Any]]:
        return [{c: getattr(r, c) for c in self.columns} for r in self.rows]


def solution_order_check(g1: GeneratorSpec, g2: GeneratorSpec, terminals: dict[str, Any],
                         paths: PathBundle, stop: StoppingTimeField | None = None,
                         cfg: SolverConfig | None = None, tol: float = ORDER_TOL) -> OrderReport:
    """Solve both BSDEs per terminal on the same paths; pass iff Y1 >= Y2 - tol everywhere."""
    rows = []
    for name, term in terminals.items():
        s1 = solve_bsde(g1, term, paths, stop, cfg)
        s2 = solve_bsde(g2, term, paths, stop, cfg)
        diff = s1.Y - s2.Y
        rows.append(OrderRow(name, float(diff.min()), float(diff.max()), s1.y0, s2.y0))
    config = {"g1": g1.to_dict(), "g2": g2.to_dict(),
              "terminals": {k: (v.to_dict() if isinstance(v, Terminal) else "array")
                            for k, v in terminals.items()},
              "n_paths": paths.n_paths, "seed": paths.seed,
              "grid": [paths.grid.t_start, paths.grid.t_end, paths.grid.n_steps],
              "solver": (cfg or SolverConfig()).to_dict(), "tol": tol}
    return OrderReport(tuple(rows), tol, config)


@dataclass(frozen=True)
class ProbeRow:
    t: float
    y: float
    z: tuple[float, ...]
    limit1: float
    limit2: float
    limit_stderr: float
    tol: float
    direct_g1: float
    direct_g2: float
    verdict: str

    @property
    def difference(self) -> float:
        return self.limit1 - self.limit2


@dataclass(frozen=True)
class GeneratorOrderReport:
    """status is "checked" or "hypothesis violated"; rows are empty in the latter case."""

    status: str
    hypothesis: tuple[dict[str, Any], ...]
    rows: tuple[ProbeRow, ...]
    config: dict[str, Any] = field(default_factory=dict)

    columns = ("y", "z", "limit1", "limit2", "direct_g1", "direct_g2", "verdict")

    @property
    def hypothesis_holds(self) -> bool:
        return self.status == "checked"

    @property
    def verdict(self) -> str:
        if not self.hypothesis_holds:
            return "hypothesis violated"
        return "pass" if all(r.verdict == "pass" for r in self.rows) else "fail"

    def csv_rows(self) -> list[dict[str, Any]]:
        out = []
        for r in self.rows:
            z = r.z[0] if len(r.z) == 1 else ";".join(repr(v) for v in r.z)
            out.append({"y": r.y, "z": z, "limit1": r.limit1, "limit2": r.limit2,
                        "direct_g1": r.direct_g1, "direct_g2": r.direct_g2,
                        "verdict": r.verdict})
        return out


def _family_check(g1, g2, t, y, z, eps, seed, n_paths, n_steps, C0, cfg):
    d = len(z)
    grid = TimeGrid(t, t + eps, n_steps)
    coeffs = brownian(d)
    bundle = simulate_brownian(grid, n_paths, d, seed)
    bundle = euler_maruyama(coeffs, t, np.zeros(d), grid, bundle)
    stop = hitting_time(bundle.state, np.zeros(d), C0, grid)
    term = Terminal("state_linear", {"y": y, "q": list(z), "x": [0.0] * d})
    rep = solution_order_check(g1, g2, {"family": term}, bundle, stop, cfg)
    return {"y": y, "z": list(z), "eps": eps, "min_diff": rep.min_diff, "passed": rep.passed}


def converse_compare(g1: GeneratorSpec, g2: GeneratorSpec,
                     probes: Sequence[tuple[float, float, Sequence[float]]],
                     epsilon_schedule: Sequence[float], cfg: SolverConfig | None = None,
                     n_paths: int = 20_000, n_batches: int = 16, n_steps: int = 64,
                     seed: int = 0, C0: float = 5.0, horizon: float = 1.0,
                     hypothesis_paths: int = 2_000) -> GeneratorOrderReport:
    """Infer g1 >= g2 at each probe (t, y, z) from difference-quotient limits.

    Both generators share sub-seeds at every probe (common random numbers).
    The ordering tolerance is twice the combined extrapolation standard
    error, floored at 1e-2.
    """
    cfg = cfg or SolverConfig()
    probes = [(float(t), float(y), tuple(float(v) for v in np.atleast_1d(z))) for t, y, z in probes]
    eps = tuple(float(e) for e in epsilon_schedule)
    config = {"g1": g1.to_dict(), "g2": g2.to_dict(),
              "probes": [[t, y, list(z)] for t, y, z in probes], "epsilon_schedule": list(eps),
              "solver": cfg.to_dict(), "n_paths": n_paths, "n_batches": n_batches,
              "n_steps": n_steps, "seed": seed, "C0": C0, "horizon": horizon,
              "hypothesis_paths": hypothesis_paths}

    jobs = [(i, j, p, e) for i, p in enumerate(probes) for j, e in enumerate(eps)]
    hyp = ordered_map(lambda job: _family_check(
        g1, g2, job[2][0], job[2][1], job[2][2], job[3], rng.derive_seed(seed, 1, job[0], job[1]),
        hypothesis_paths, n_steps, C0, cfg), jobs)
    if not all(h["passed"] for h in hyp):
        return GeneratorOrderReport("hypothesis violated", tuple(hyp), (), config)

    def probe_job(item):
        i, (t, y, z) = item
        base = brownian_specialization(g1, y, z, t=t, C0=C0, epsilon_schedule=eps, solver=cfg,
                                       n_paths=n_paths, n_batches=n_batches, n_steps=n_steps,
                                       seed=rng.derive_seed(seed, 2, i), horizon=horizon)
        r1 = epsilon_sweep(base)
        r2 = epsilon_sweep(replace(base, gen=g2))
        se = math.hypot(r1.fitted_limit_stderr, r2.fitted_limit_stderr)
        tol = max(2.0 * se, LIMIT_TOL_FLOOR)
        zz = np.asarray(z)[None, :]
        d1 = float(g1(t, np.array([y]), zz)[0])
        d2 = float(g2(t, np.array([y]), zz)[0])
        ok = r1.fitted_limit >= r2.fitted_limit - tol
        return ProbeRow(t, y, z, r1.fitted_limit, r2.fitted_limit, se, tol, d1, d2,
                        "pass" if ok else "fail")

    rows = tuple(ordered_map(probe_job, list(enumerate(probes))))
    return GeneratorOrderReport("checked", tuple(hyp), rows, config)
