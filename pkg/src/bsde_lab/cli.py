"""Config-driven experiment runner.

    bsde-lab --config experiment.json [--out-dir DIR] [--seed N] [--quiet]

Exit status: 0 pass, 1 property failure, 2 inconclusive (including a violated
comparison hypothesis), 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import parallel
from .approx import (LocalizationContext, ProbeSet, approx_sequence_check,
                     generator_localization, make_infconv_spec)
from .bsde_engine import (SolverConfig, check_bound_global, check_bound_small_horizon,
                          oracle_cole_hopf, oracle_linear, solve_bsde, write_solution)
from .comparison import converse_compare
from .core import CoefficientPlan, SamplePlan, TimeGrid, validate_assumption_a, \
    validate_coefficients
from .presets import Terminal, UnknownPresetError, brownian, make_coefficients, make_generator
from .reports import DIAGNOSTIC_COLUMNS, Table, as_table, diagnostics_row, emit_report
from .representation import RepresentationTask, default_schedule, epsilon_sweep, lp_sweep, \
    z_energy_decay
from .sde_engine import euler_maruyama, hitting_time, simulate_brownian, write_bundle

EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_CONFIG = 0, 1, 2, 3
EXIT_CODES = {"pass": EXIT_PASS, "fail": EXIT_FAIL, "inconclusive": EXIT_INCONCLUSIVE,
              "hypothesis violated": EXIT_INCONCLUSIVE}
COMMANDS = ("validate", "simulate", "solve", "approx", "represent", "lp-sweep", "z-energy",
            "compare")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_count = {"type": "integer", "minimum": 1}
_vec = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}
_preset = {"type": "object", "required": ["preset"], "additionalProperties": False,
           "properties": {"preset": {"type": "string"}, "params": {"type": "object"}}}
_schedule = {"type": "array", "items": _pos, "minItems": 1}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["command"],
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "name": {"type": "string"},
        "generator": _preset, "g1": _preset, "g2": _preset,
        "coefficients": _preset,
        "function": _preset,
        "terminal": {"type": "object", "required": ["kind"], "additionalProperties": False,
                     "properties": {"kind": {"type": "string"}, "params": {"type": "object"}}},
        "solver": {"type": "object"},
        "grid": {"type": "object", "required": ["t_end", "n_steps"], "additionalProperties": False,
                 "properties": {"t_start": _num, "t_end": _num,
                                "n_steps": {"type": "integer", "minimum": 0}}},
        "anchor": {"type": "object", "additionalProperties": False,
                   "properties": {"t": _num, "x": _vec, "y": _num, "q": _vec}},
        "x": _vec, "t": _num, "C0": _pos, "horizon": _pos, "dim": _count,
        "n_paths": _count, "n_steps": _count, "n_batches": _count, "n_conditioning": _count,
        "hypothesis_paths": _count,
        "epsilon_schedule": _schedule,
        "n_schedule": {"type": "array", "items": _count, "minItems": 1},
        "x_grid": {"type": "object", "required": ["start", "stop", "num"],
                   "properties": {"start": _num, "stop": _num, "num": _count}},
        "mode": {"enum": ["L1", "Lp", "pathwise", "infconv", "localization"]},
        "p": _pos,
        "probes": {"oneOf": [
            {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
            {"type": "object", "properties": {"half_width": _pos, "per_axis": _count}}]},
        "omega": _vec,
        "oracle": {"type": "object", "required": ["kind"],
                   "properties": {"kind": {"enum": ["linear", "cole_hopf"]}, "tolerance": _pos}},
        "bounds": {"type": "array", "items": {"enum": ["global", "small_horizon"]}},
        "slack": {"type": "number", "minimum": 0},
        "tol": _pos, "atol_energy": _pos, "ratio": _pos,
        "write_paths": {"type": "boolean"}, "write_solution": {"type": "boolean"},
    },
}


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# config helpers


def load_config(path: str | Path, seed_override: int | None = None) -> dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("malformed config: top level must be an object")
    if seed_override is not None:
        cfg["seed"] = seed_override
    if "seed" not in cfg:
        raise ConfigError("seed required: set \"seed\" in the config or pass --seed")
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return cfg


def _generator(spec: dict[str, Any]):
    return make_generator(spec["preset"], **dict(spec.get("params", {})))


def _coefficients(cfg: dict[str, Any], dim: int):
    spec = cfg.get("coefficients")
    if spec is None:
        return brownian(dim)
    return make_coefficients(spec["preset"], **dict(spec.get("params", {})))


def _solver(cfg: dict[str, Any]) -> SolverConfig:
    return SolverConfig(**cfg.get("solver", {}))


def _vector(v, dim: int) -> tuple[float, ...]:
    return tuple(np.broadcast_to(np.asarray(v, dtype=float), (dim,)).tolist())


# --------------------------------------------------------------------------
# commands; each returns a Table


def cmd_validate(cfg, out_dir) -> Table:
    rows = []
    reports = []
    if "generator" in cfg:
        gen = _generator(cfg["generator"])
        rep = validate_assumption_a(gen, SamplePlan.default(gen.dim_z))
        reports.append(rep)
        rows += [{"object": "generator", **r} for r in rep.rows()]
    if "coefficients" in cfg:
        co = _coefficients(cfg, 1)
        rep = validate_coefficients(co, CoefficientPlan.default(co.dim_x))
        reports.append(rep)
        rows += [{"object": "coefficients", **r} for r in rep.rows()]
    if not reports:
        raise ConfigError("validate needs a generator and/or coefficients section")
    ok = all(r.passed for r in reports)
    return Table("validate", ("object", "clause", "passed", "worst_ratio", "worst_excess"),
                 tuple(rows), "pass" if ok else "fail", {"passed": ok}, cfg)


def cmd_simulate(cfg, out_dir) -> Table:
    g = cfg.get("grid", {"t_end": 1.0, "n_steps": 100})
    grid = TimeGrid(float(g.get("t_start", 0.0)), float(g["t_end"]), int(g["n_steps"]))
    dim = int(cfg.get("dim", 1))
    n = int(cfg.get("n_paths", 10_000))
    bundle = simulate_brownian(grid, n, dim, cfg["seed"])
    summary: dict[str, Any] = {"n_paths": n, "dt": grid.dt if grid.n_steps else 0.0}
    if "coefficients" in cfg or "C0" in cfg:
        co = _coefficients(cfg, dim)
        x = _vector(cfg.get("x", 0.0), co.dim_x)
        bundle = euler_maruyama(co, grid.t_start, x, grid, bundle)
        if "C0" in cfg:
            stop = hitting_time(bundle.state, x, cfg["C0"], grid)
            summary["hit_fraction"] = stop.hit_fraction
    rows, ok = [], True
    inc = bundle.increments
    for k in range(grid.n_steps):
        for c in range(dim):
            v = inc[:, k, c]
            mean, var = float(v.mean()), float(v.var(ddof=1))
            within = (abs(mean) <= 4 * math.sqrt(grid.dt / n)
                      and abs(var - grid.dt) <= 4 * math.sqrt(2.0 / n) * grid.dt)
            ok &= within
            rows.append({"step": k, "component": c, "mean": mean, "variance": var,
                         "dt": grid.dt, "within_4se": within})
    if cfg.get("write_paths"):
        write_bundle(out_dir / "paths.bin", bundle)
    return Table("simulate", ("step", "component", "mean", "variance", "dt", "within_4se"),
                 tuple(rows), "pass" if ok else "fail", summary, cfg)


def cmd_solve(cfg, out_dir) -> Table:
    gen = _generator(cfg["generator"])
    horizon = float(cfg.get("horizon", 1.0))
    grid = TimeGrid(0.0, horizon, int(cfg.get("n_steps", 64)))
    n = int(cfg.get("n_paths", 100_000))
    term_cfg = cfg.get("terminal", {"kind": "constant", "params": {"value": 0.0}})
    terminal = Terminal(term_cfg["kind"], dict(term_cfg.get("params", {})))
    bundle = simulate_brownian(grid, n, gen.dim_z, cfg["seed"])
    stop = None
    if terminal.kind == "state_linear" or "coefficients" in cfg:
        co = _coefficients(cfg, gen.dim_z)
        x = _vector(cfg.get("x", 0.0), co.dim_x)
        bundle = euler_maruyama(co, 0.0, x, grid, bundle)
        if "C0" in cfg:
            stop = hitting_time(bundle.state, x, cfg["C0"], grid)
    sol = solve_bsde(gen, terminal, bundle, stop, _solver(cfg))
    row = diagnostics_row(cfg["generator"]["preset"], sol)
    y0, se = row["y0"], row["stderr"]
    ok = sol.diagnostics.clipped_fraction < 1e-3
    summary: dict[str, Any] = {"y0": y0, "stderr": se, "y0_recursion": sol.y0,
                               "picard_residual": sol.diagnostics.picard_residual,
                               "regression_condition": sol.diagnostics.regression_condition}
    row.update(oracle=None, oracle_stderr=None, tolerance=None)
    oracle = cfg.get("oracle")
    if oracle is not None:
        if oracle["kind"] == "linear":
            if cfg["generator"]["preset"] != "linear_y" or terminal.kind != "constant":
                raise ConfigError("linear oracle needs the linear_y preset and a constant terminal")
            ref = oracle_linear(gen.params["beta"], float(terminal.params.get("value", 0.0)),
                                horizon)
            ref_se, tol = 0.0, float(oracle.get("tolerance", 5e-3))
        else:
            if cfg["generator"]["preset"] != "pure_quadratic":
                raise ConfigError("cole_hopf oracle needs the pure_quadratic preset")
            ref, ref_se = oracle_cole_hopf(gen.gamma, sol.terminal)
            tol = 3.0 * math.hypot(se, ref_se)
        row.update(oracle=ref, oracle_stderr=ref_se, tolerance=tol)
        ok &= abs(y0 - ref) <= tol
    bounds = []
    for name in cfg.get("bounds", []):
        slack = float(cfg.get("slack", 1e-3))
        rep = (check_bound_global(sol, gen, slack=slack) if name == "global"
               else check_bound_small_horizon(sol, gen, slack=slack))
        bounds.append(rep.row())
        ok &= rep.passed or not rep.applicable
    summary["bounds"] = bounds
    if cfg.get("write_solution"):
        write_solution(out_dir / "solution.bin", sol, cfg["seed"])
    cols = DIAGNOSTIC_COLUMNS + ("oracle", "oracle_stderr", "tolerance")
    return Table("solve", cols, (row,), "pass" if ok else "fail", summary, cfg)


def cmd_approx(cfg, out_dir) -> Table:
    ns = cfg.get("n_schedule", [2 ** k for k in range(9)])
    if cfg.get("mode", "infconv") == "localization":
        gen = _generator(cfg["generator"])
        co = _coefficients(cfg, gen.dim_z)
        a = cfg.get("anchor", {})
        ctx = LocalizationContext.for_problem(gen, co, float(a.get("y", 0.0)),
                                              _vector(a.get("x", 0.0), co.dim_x),
                                              _vector(a.get("q", 1.0), co.dim_x))
        pr = cfg.get("probes", {})
        if isinstance(pr, list):
            raise ConfigError("localization probes take {half_width, per_axis}")
        probes = ProbeSet.cube(float(pr.get("half_width", 2.0)), int(pr.get("per_axis", 10)))
        rep = generator_localization(gen, ctx, co, ns, float(a.get("t", 0.0)), probes,
                                     cfg.get("omega"), tol=float(cfg.get("tol", 1e-6)))
        return as_table("approx", rep, {"M": rep.M, "psi_decreasing": rep.psi_decreasing,
                                        "psi": [r.psi for r in rep.rows]}, cfg)
    f = cfg.get("function", {"preset": "square"})
    spec = make_infconv_spec(f["preset"], **dict(f.get("params", {})))
    g = cfg.get("x_grid", {"start": -5.0, "stop": 5.0, "num": 101})
    xs = np.linspace(g["start"], g["stop"], int(g["num"]))
    rep = approx_sequence_check(spec, xs, ns, tol=float(cfg.get("tol", 1e-8)))
    return as_table("approx", rep, {"bound_ok": rep.bound_ok, "monotone_ok": rep.monotone_ok,
                                    "gap_shrinks": rep.gap_shrinks, "final_gap": rep.final_gap,
                                    "witness": rep.witness}, cfg)


def _representation_task(cfg) -> RepresentationTask:
    gen = _generator(cfg["generator"])
    co = _coefficients(cfg, gen.dim_z)
    a = cfg.get("anchor", {})
    t = float(a.get("t", 0.0))
    horizon = float(cfg.get("horizon", 1.0))
    return RepresentationTask(
        gen=gen, coeffs=co, t=t, x=_vector(a.get("x", 0.0), co.dim_x), y=float(a.get("y", 0.0)),
        q=_vector(a.get("q", 1.0), co.dim_x), C0=float(cfg.get("C0", 5.0)),
        epsilon_schedule=tuple(cfg.get("epsilon_schedule", default_schedule(horizon, t))),
        mode=cfg.get("mode", "L1"), p=float(cfg.get("p", 1.0)), solver=_solver(cfg),
        n_paths=int(cfg.get("n_paths", 100_000)), seed=cfg["seed"],
        n_steps=int(cfg.get("n_steps", 64)), n_batches=int(cfg.get("n_batches", 32)),
        horizon=horizon, n_conditioning=int(cfg.get("n_conditioning", 5)))


def cmd_represent(cfg, out_dir) -> Table:
    rep = epsilon_sweep(_representation_task(cfg))
    return as_table("represent", rep, rep.summary(), cfg)


def cmd_lp_sweep(cfg, out_dir) -> Table:
    rep = lp_sweep(_representation_task(cfg), float(cfg.get("p", 2.0)))
    return as_table("lp-sweep", rep, rep.summary(), cfg)


def cmd_z_energy(cfg, out_dir) -> Table:
    gen = _generator(cfg["generator"])
    co = _coefficients(cfg, gen.dim_z)
    rep = z_energy_decay(gen, co, cfg.get("epsilon_schedule", [0.2, 0.1, 0.05, 0.025]),
                         t=float(cfg.get("t", 0.0)), x=_vector(cfg.get("x", 0.0), co.dim_x),
                         C0=float(cfg.get("C0", 5.0)), solver=_solver(cfg),
                         n_paths=int(cfg.get("n_paths", 20_000)), seed=cfg["seed"],
                         n_steps=int(cfg.get("n_steps", 64)),
                         atol_energy=float(cfg.get("atol_energy", 1e-2)),
                         ratio=float(cfg.get("ratio", 0.2)))
    return as_table("z-energy", rep, {"strictly_decreasing": rep.strictly_decreasing}, cfg)


def cmd_compare(cfg, out_dir) -> Table:
    g1, g2 = _generator(cfg["g1"]), _generator(cfg["g2"])
    probes = cfg.get("probes")
    if probes is None or isinstance(probes, dict):
        probes = [(0.0, y, [z] * g1.dim_z) for y in (-1.0, 0.0, 1.0) for z in (-1.0, 0.0, 1.0)]
    rep = converse_compare(g1, g2, probes,
                           cfg.get("epsilon_schedule", [2.0 ** -k for k in range(2, 6)]),
                           _solver(cfg), n_paths=int(cfg.get("n_paths", 20_000)),
                           n_batches=int(cfg.get("n_batches", 16)),
                           n_steps=int(cfg.get("n_steps", 64)), seed=cfg["seed"],
                           C0=float(cfg.get("C0", 5.0)), horizon=float(cfg.get("horizon", 1.0)),
                           hypothesis_paths=int(cfg.get("hypothesis_paths", 2_000)))
    summary = {"status": rep.status, "hypothesis": list(rep.hypothesis),
               "differences": [r.difference for r in rep.rows]}
    return as_table("compare", rep, summary, cfg)


HANDLERS = {"validate": cmd_validate, "simulate": cmd_simulate, "solve": cmd_solve,
            "approx": cmd_approx, "represent": cmd_represent, "lp-sweep": cmd_lp_sweep,
            "z-energy": cmd_z_energy, "compare": cmd_compare}


# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; argparse's own status 2 means "inconclusive" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bsde-lab", description="Run one BSDE laboratory experiment.")
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--out-dir", default=".", help="directory for report files")
    p.add_argument("--seed", type=int, default=None, help="override the config seed (u64)")
    p.add_argument("--quiet", action="store_true", help="suppress the verdict line")
    return p


def _prepare_out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot write output: {out}: {exc.strerror}") from None
    if not out.is_dir() or not os.access(out, os.W_OK):
        raise ConfigError(f"cannot write output: {out} is not a writable directory")
    return out


def run(config_path: str | Path, out_dir: str | Path = ".", seed: int | None = None,
        quiet: bool = True) -> int:
    """Execute one experiment; returns the exit status."""
    try:
        if seed is not None and not 0 <= seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        try:
            parallel.worker_count()
        except ValueError as exc:
            raise ConfigError(f"BSDE_LAB_THREADS: {exc}") from None
        cfg = load_config(config_path, seed)
        out = _prepare_out_dir(str(out_dir))
        command = cfg["command"]
        try:
            table = HANDLERS[command](cfg, out)
        except UnknownPresetError as exc:
            raise ConfigError(f"unknown preset: {exc.args[0]}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {command} configuration: {exc}") from None
        stem = command
        try:
            emit_report(table, "csv", out / f"{stem}.csv")
            emit_report(table, "json", out / f"{stem}.json")
        except OSError as exc:
            raise ConfigError(f"cannot write output: {exc}") from None
    except ConfigError as exc:
        print(f"bsde-lab: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if not quiet:
        bits = ", ".join(f"{k}={_short(v)}" for k, v in table.summary.items()
                         if isinstance(v, (int, float, str, bool)))
        print(f"{command}: {table.verdict}" + (f" ({bits})" if bits else "")
              + f" -> {out / (stem + '.csv')}")
    return EXIT_CODES.get(table.verdict, EXIT_FAIL)


def _short(v):
    return f"{v:.6g}" if isinstance(v, float) else v


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.config, args.out_dir, args.seed, args.quiet)


if __name__ == "__main__":
    sys.exit(main())
