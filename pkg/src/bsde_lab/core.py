"""Domain types and sampled checks of the standing assumptions.

Generators are vectorized over paths: ``g(t, y, z, omega)`` takes ``y`` of
shape ``(n,)``, ``z`` of shape ``(n, d)`` and ``omega`` (the Brownian value
at time ``t`` per path, shape ``(n, d)``, or ``None``) and returns ``(n,)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

RTOL = 1e-9
ATOL = 1e-12

GeneratorFn = Callable[[float, np.ndarray, np.ndarray, "np.ndarray | None"], np.ndarray]


class EvaluationError(RuntimeError):
    """A user-supplied function failed at a specific sample point."""

    def __init__(self, message: str, point: dict[str, Any]):
        super().__init__(f"{message} at {point}")
        self.point = point


# --------------------------------------------------------------------------
# convex modulus


@dataclass(frozen=True)
class ConvexModulus:
    """Strictly increasing convex phi on [0, inf) with phi(0) = 0.

    ``family`` is one of ``power`` (r**b, b >= 1), ``exp_minus_one``
    (exp(scale*r) - 1), ``linear`` (slope*r) or ``custom`` (``func`` given,
    checked for convexity on construction).
    """

    family: str
    param: float = 1.0
    func: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.family == "power":
            if not self.param >= 1.0:
                raise ValueError(f"power modulus needs exponent >= 1, got {self.param}")
        elif self.family in ("exp_minus_one", "linear"):
            if not self.param > 0.0:
                raise ValueError(f"{self.family} modulus needs a positive parameter, got {self.param}")
        elif self.family == "custom":
            if self.func is None:
                raise ValueError("custom modulus needs func")
            _self_check(self)
        else:
            raise ValueError(f"unknown modulus family {self.family!r}")

    @classmethod
    def power(cls, b: float) -> ConvexModulus:
        return cls("power", float(b))

    @classmethod
    def exp_minus_one(cls, scale: float = 1.0) -> ConvexModulus:
        return cls("exp_minus_one", float(scale))

    @classmethod
    def linear(cls, slope: float = 1.0) -> ConvexModulus:
        return cls("linear", float(slope))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ValueError("modulus evaluated at a negative argument")
        if self.family == "power":
            out = r ** self.param
        elif self.family == "exp_minus_one":
            out = np.expm1(self.param * r)
        elif self.family == "linear":
            out = self.param * r
        else:
            out = np.asarray(self.func(r), dtype=float)
        return out if out.ndim else float(out)

    def inverse(self, v: float, tol: float = 1e-13) -> float:
        """phi^{-1}(v) by bisection on an expanding bracket."""
        if v < 0:
            raise ValueError("phi^{-1} of a negative value")
        if v == 0:
            return 0.0
        hi = 1.0
        while self(hi) < v:
            hi *= 2.0
            if hi > 1e300:
                raise OverflowError("phi^{-1} bracket overflow")
        lo = 0.0
        while hi - lo > tol * max(1.0, hi):
            mid = 0.5 * (lo + hi)
            if self(mid) < v:
                lo = mid
            else:
                hi = mid
        return hi

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "param": self.param}


def _self_check(phi: ConvexModulus) -> None:
    r = np.linspace(0.0, 10.0, 201)
    v = np.asarray(phi.func(r), dtype=float)
    if abs(v[0]) > ATOL:
        raise ValueError("custom modulus must vanish at 0")
    if np.any(np.diff(v) <= 0):
        raise ValueError("custom modulus must be strictly increasing")
    mid = np.asarray(phi.func(0.5 * (r[:-1] + r[1:])), dtype=float)
    if np.any(mid > 0.5 * (v[:-1] + v[1:]) + RTOL * np.abs(v[1:]) + ATOL):
        raise ValueError("custom modulus fails the midpoint convexity check")


def eval_modulus(phi: ConvexModulus, r: float) -> float:
    if r < 0:
        raise ValueError(f"modulus domain is [0, inf), got r={r}")
    return float(phi(r))


# --------------------------------------------------------------------------
# alpha process


@dataclass(frozen=True)
class AlphaProcess:
    """Non-negative process alpha_t from the growth condition.

    ``kind`` is ``constant`` (``value``), ``deterministic`` (``values`` on
    ``times``, piecewise constant from the left) or ``path`` (``func(t,
    omega)`` of the Brownian value at t).
    """

    kind: str
    value: float = 0.0
    times: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    func: Callable[[float, np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    sup_bound: float | None = None
    integral_sup_bound: float | None = None
    assumption_b: bool = False
    description: str = ""

    def __post_init__(self):
        if self.kind == "constant":
            if self.value < 0:
                raise ValueError("alpha must be non-negative")
            if self.sup_bound is None:
                object.__setattr__(self, "sup_bound", float(self.value))
        elif self.kind == "deterministic":
            if len(self.times) != len(self.values) or not self.times:
                raise ValueError("deterministic alpha needs matching times/values")
            if min(self.values) < 0:
                raise ValueError("alpha must be non-negative")
            if self.sup_bound is None:
                object.__setattr__(self, "sup_bound", float(max(self.values)))
        elif self.kind == "path":
            if self.func is None:
                raise ValueError("path alpha needs func")
        else:
            raise ValueError(f"unknown alpha kind {self.kind!r}")

    @classmethod
    def constant(cls, c: float) -> AlphaProcess:
        return cls("constant", value=float(c))

    @property
    def bounded(self) -> bool:
        return self.sup_bound is not None

    @property
    def satisfies_b(self) -> bool:
        # bounded alpha trivially has uniformly integrable squares
        return self.bounded or self.assumption_b

    def __call__(self, t: float, omega: np.ndarray | None = None, n: int | None = None) -> np.ndarray:
        if n is None:
            n = 1 if omega is None else np.shape(omega)[0]
        if self.kind == "constant":
            return np.full(n, self.value)
        if self.kind == "deterministic":
            idx = int(np.searchsorted(self.times, t, side="right")) - 1
            return np.full(n, self.values[max(idx, 0)])
        if omega is None:
            omega = np.zeros((n, 1))
        return np.asarray(self.func(t, omega), dtype=float).reshape(n)

    def integral_bound(self, length: float) -> float | None:
        """Upper bound for ||int_s^{s+length} alpha dr||_inf, or None."""
        candidates = []
        if self.sup_bound is not None:
            candidates.append(self.sup_bound * length)
        if self.integral_sup_bound is not None:
            candidates.append(self.integral_sup_bound)
        return min(candidates) if candidates else None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "sup_bound": self.sup_bound,
                             "integral_sup_bound": self.integral_sup_bound}
        if self.kind == "constant":
            d["value"] = self.value
        elif self.kind == "deterministic":
            d["times"] = list(self.times)
            d["values"] = list(self.values)
        else:
            d["description"] = self.description
        return d


# --------------------------------------------------------------------------
# generator and coefficients


@dataclass(frozen=True)
class GeneratorSpec:
    g: GeneratorFn = field(compare=False)
    beta: float
    gamma: float
    phi: ConvexModulus
    alpha: AlphaProcess
    dim_z: int = 1
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.dim_z < 1:
            raise ValueError("dim_z must be >= 1")

    def __call__(self, t, y, z, omega=None) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        z = np.asarray(z, dtype=float).reshape(y.shape[0], self.dim_z)
        return np.asarray(self.g(float(t), y, z, omega), dtype=float).reshape(y.shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "params": dict(self.params), "beta": self.beta,
                "gamma": self.gamma, "dim_z": self.dim_z, "phi": self.phi.to_dict(),
                "alpha": self.alpha.to_dict()}


@dataclass(frozen=True)
class SdeCoefficients:
    """Drift ``b(t, x) -> (n, m)`` and diffusion ``sigma(t, x) -> (n, m, d)``."""

    b: Callable[[float, np.ndarray], np.ndarray] = field(compare=False)
    sigma: Callable[[float, np.ndarray], np.ndarray] = field(compare=False)
    mu: float
    nu: float
    dim_x: int = 1
    dim_w: int = 1
    name: str = "custom"
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.mu < 0 or self.nu < 0:
            raise ValueError("mu and nu must be >= 0")
        if self.dim_x < 1 or self.dim_w < 1:
            raise ValueError("dimensions must be positive")

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim_x)
        return np.asarray(self.b(t, x), dtype=float).reshape(x.shape[0], self.dim_x)

    def diffusion(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim_x)
        s = np.asarray(self.sigma(t, x), dtype=float)
        if s.shape != (x.shape[0], self.dim_x, self.dim_w):
            raise ValueError(f"sigma returned shape {s.shape}, expected "
                             f"{(x.shape[0], self.dim_x, self.dim_w)}")
        return s

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "params": dict(self.params), "mu": self.mu,
                "nu": self.nu, "dim_x": self.dim_x, "dim_w": self.dim_w}


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if self.t_start < 0:
            raise ValueError("t_start must be >= 0")
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.n_steps > 0 and not self.t_end > self.t_start:
            raise ValueError("zero-length grid: t_end must exceed t_start")
        if self.n_steps == 0 and self.t_end != self.t_start:
            raise ValueError("a grid without steps must have t_end == t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps if self.n_steps else 0.0

    @property
    def points(self) -> np.ndarray:
        if self.n_steps == 0:
            return np.array([self.t_start])
        pts = self.t_start + self.dt * np.arange(self.n_steps + 1)
        pts[-1] = self.t_end
        return pts

    @property
    def length(self) -> float:
        return self.t_end - self.t_start


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ClauseResult:
    name: str
    passed: bool
    worst_ratio: float
    worst_excess: float
    witness: dict[str, Any] | None


@dataclass(frozen=True)
class ValidationReport:
    clauses: tuple[ClauseResult, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.clauses)

    def __getitem__(self, name: str) -> ClauseResult:
        for c in self.clauses:
            if c.name == name:
                return c
        raise KeyError(name)

    def rows(self) -> list[dict[str, Any]]:
        return [{"clause": c.name, "passed": c.passed, "worst_ratio": c.worst_ratio,
                 "worst_excess": c.worst_excess,
                 "witness": "" if c.witness is None else repr(c.witness)}
                for c in self.clauses]


@dataclass(frozen=True)
class SamplePlan:
    """Cartesian grid of (t, y, z, omega) sample points for generator checks."""

    ts: tuple[float, ...]
    ys: tuple[float, ...]
    zs: tuple[tuple[float, ...], ...]
    omegas: tuple[tuple[float, ...], ...] | None = None

    @classmethod
    def default(cls, dim_z: int = 1, t_end: float = 1.0) -> SamplePlan:
        levels = np.linspace(-3.0, 3.0, 7)
        zs = [tuple(v) for v in itertools.product(levels, repeat=dim_z)] if dim_z <= 2 else \
             [tuple(np.full(dim_z, s)) for s in levels]
        om = [tuple(np.full(dim_z, s)) for s in (-2.0, -0.5, 0.0, 1.0, 2.5)]
        return cls(ts=(0.0, 0.5 * t_end, t_end), ys=tuple(np.linspace(-4.0, 4.0, 17)),
                   zs=tuple(zs), omegas=tuple(om))

    def points(self, dim_z: int):
        if not (self.ts and self.ys and self.zs):
            raise ValueError("sample plan must be non-empty")
        oms = self.omegas if self.omegas else (tuple(0.0 for _ in range(dim_z)),)
        grid = list(itertools.product(range(len(self.ys)), range(len(self.zs)), range(len(oms))))
        yi, zi, oi = (np.array(v) for v in zip(*grid))
        y = np.asarray(self.ys, dtype=float)[yi]
        z = np.asarray(self.zs, dtype=float).reshape(len(self.zs), dim_z)[zi]
        om = np.asarray(oms, dtype=float).reshape(len(oms), dim_z)[oi]
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise ValueError("sample plan must be bounded")
        return y, z, om


def _safe_eval(gen: GeneratorSpec, t: float, y, z, om) -> np.ndarray:
    try:
        return gen(t, y, z, om)
    except Exception as exc:
        for i in range(len(y)):
            try:
                gen(t, y[i:i + 1], z[i:i + 1], om[i:i + 1])
            except Exception:
                raise EvaluationError(f"generator evaluation failed ({exc})",
                                      {"t": t, "y": float(y[i]), "z": z[i].tolist(),
                                       "omega": om[i].tolist()}) from exc
        raise


def _clause(name: str, lhs: np.ndarray, rhs: np.ndarray, points: list[dict]) -> ClauseResult:
    allowed = rhs + RTOL * np.abs(rhs) + ATOL
    excess = lhs - rhs
    ok = lhs <= allowed
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0),
                         np.where(lhs > ATOL, np.inf, 0.0))
    worst = int(np.argmax(excess)) if excess.size else 0
    witness = None
    if not ok.all():
        witness = points[int(np.argmax(np.where(ok, -np.inf, excess)))]
    return ClauseResult(name, bool(ok.all()), float(np.max(ratio)) if ratio.size else 0.0,
                        float(excess[worst]) if excess.size else 0.0, witness)


def validate_assumption_a(gen: GeneratorSpec, plan: SamplePlan | None = None) -> ValidationReport:
    """Check monotonicity in y and convex growth on every sample point."""
    plan = plan or SamplePlan.default(gen.dim_z)
    y, z, om = plan.points(gen.dim_z)
    lhs_m, rhs_m, lhs_g, rhs_g, finite, pts = [], [], [], [], [], []
    for t in plan.ts:
        gy = _safe_eval(gen, t, y, z, om)
        g0 = _safe_eval(gen, t, np.zeros_like(y), z, om)
        finite.append(np.isfinite(gy) & np.isfinite(g0))
        lhs_m.append(y * (gy - g0))
        rhs_m.append(gen.beta * y ** 2)
        lhs_g.append(np.abs(gy))
        rhs_g.append(gen.alpha(t, om, n=len(y)) + gen.phi(np.abs(y))
                     + 0.5 * gen.gamma * np.sum(z ** 2, axis=1))
        pts.extend({"t": t, "y": float(y[i]), "z": z[i].tolist(), "omega": om[i].tolist()}
                   for i in range(len(y)))
    fin = np.concatenate(finite)
    clauses = [
        _clause("monotonicity", np.nan_to_num(np.concatenate(lhs_m), nan=np.inf),
                np.concatenate(rhs_m), pts),
        _clause("growth", np.nan_to_num(np.concatenate(lhs_g), nan=np.inf),
                np.concatenate(rhs_g), pts),
        ClauseResult("finite", bool(fin.all()), 0.0 if fin.all() else math.inf,
                     0.0 if fin.all() else math.inf,
                     None if fin.all() else pts[int(np.argmin(fin))]),
    ]
    return ValidationReport(tuple(clauses))


@dataclass(frozen=True)
class CoefficientPlan:
    ts: tuple[float, ...]
    xs: tuple[tuple[float, ...], ...]

    @classmethod
    def default(cls, dim_x: int = 1) -> CoefficientPlan:
        levels = np.linspace(-5.0, 5.0, 21)
        if dim_x == 1:
            xs = [(float(v),) for v in levels]
        else:
            xs = [tuple(float(s) * np.cos(np.arange(dim_x) + k)) for k, s in enumerate(levels)]
        return cls(ts=(0.0, 0.5, 1.0), xs=tuple(xs))


def validate_coefficients(coeffs: SdeCoefficients, plan: CoefficientPlan | None = None,
                          tolerance: float = RTOL) -> ValidationReport:
    """Empirical Lipschitz (H1) and linear-growth (H2) constants on sampled pairs."""
    plan = plan or CoefficientPlan.default(coeffs.dim_x)
    x = np.asarray(plan.xs, dtype=float).reshape(len(plan.xs), coeffs.dim_x)
    i, j = np.triu_indices(len(x), k=1)
    dist = np.linalg.norm(x[i] - x[j], axis=1)
    if np.any(dist == 0):
        raise ValueError("sample pairs must be distinct")
    lip, grow, lip_pts, grow_pts = [], [], [], []
    for t in plan.ts:
        try:
            b = coeffs.drift(t, x)
            s = coeffs.diffusion(t, x)
        except ValueError:
            raise
        except Exception as exc:
            raise EvaluationError(f"coefficient evaluation failed ({exc})", {"t": t}) from exc
        sf = s.reshape(len(x), -1)
        diff = np.linalg.norm(b[i] - b[j], axis=1) + np.linalg.norm(sf[i] - sf[j], axis=1)
        lip.append(diff / dist)
        grow.append((np.linalg.norm(b, axis=1) + np.linalg.norm(sf, axis=1))
                    / (1.0 + np.linalg.norm(x, axis=1)))
        lip_pts.extend({"t": t, "x": x[a].tolist(), "x2": x[c].tolist()} for a, c in zip(i, j))
        grow_pts.extend({"t": t, "x": x[a].tolist()} for a in range(len(x)))
    lip_all, grow_all = np.concatenate(lip), np.concatenate(grow)
    clauses = []
    for name, vals, const, pts in (("lipschitz", lip_all, coeffs.mu, lip_pts),
                                   ("growth", grow_all, coeffs.nu, grow_pts)):
        limit = const * (1.0 + tolerance) + ATOL
        k = int(np.argmax(vals))
        ok = bool(vals[k] <= limit)
        clauses.append(ClauseResult(name, ok, float(vals[k]), float(vals[k] - const),
                                    None if ok else pts[k]))
    return ValidationReport(tuple(clauses))
