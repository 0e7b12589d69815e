"""Inf-convolution approximants and the generator localization bound.

Both constructions optimise a function plus a convex distance penalty.  The
infimum over rational points is replaced by a finite lattice around the
anchor, followed by zoom refinement around the best lattice point.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .core import ATOL, RTOL, ConvexModulus, GeneratorSpec, SdeCoefficients
from .parallel import ordered_map

REFINE_TOL = 1e-8
MAX_ROUNDS = 20
_INITIAL_STEPS = {1: 100, 2: 30, 3: 12}


class InfConvSpecError(ValueError):
    """f violates its declared growth bound on the search lattice."""


class RefinementError(RuntimeError):
    def __init__(self, history: list[float]):
        super().__init__(f"lattice refinement did not settle after {len(history)} rounds "
                         f"(last changes {history[-3:]})")
        self.history = history


def lattice_minimize(F: Callable[[np.ndarray], np.ndarray], center, radius, h: float,
                     refine_tol: float = REFINE_TOL, max_rounds: int = MAX_ROUNDS,
                     check: Callable[[np.ndarray], None] | None = None
                     ) -> tuple[float, np.ndarray]:
    """Minimise F over {center + j*h : |j*h / radius| <= 1} and refine near the argmin.

    ``radius`` may be a scalar or one value per coordinate (ellipsoidal
    search set).  Each refinement round halves h and scans small blocks around
    the incumbent and around its per-axis parabolic vertex, never leaving the
    search set; it stops once a round improves the value by less than
    ``refine_tol``.  ``check`` sees every coarse lattice point.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    k = center.size
    radius = np.broadcast_to(np.asarray(radius, dtype=float), (k,))
    # coarse lattice: shared spacing h, clipped to the search ellipsoid
    steps = [np.arange(-math.floor(r / h + 1e-12), math.floor(r / h + 1e-12) + 1) * h
             for r in radius]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*steps, indexing="ij")], axis=1)
    def inside(p):
        scaled = np.divide(p - center, radius, out=np.zeros_like(p), where=radius > 0)
        return np.sum(scaled ** 2, axis=1) <= 1.0 + 1e-12

    pts = center + mesh
    pts = pts[inside(pts)]
    if check is not None:
        check(pts)
    vals = F(pts)
    i = int(np.argmin(vals))
    best, arg = float(vals[i]), pts[i]

    half = 4 if k <= 3 else 2
    offsets = np.stack([m.ravel() for m in np.meshgrid(*([np.arange(-half, half + 1)] * k),
                                                       indexing="ij")], axis=1)
    masks = np.array(list(itertools.product((0.0, 1.0), repeat=k)))
    eye = np.eye(k)
    history: list[float] = []
    for _ in range(max_rounds):
        # Re-centre on the per-axis parabolic vertex: a nested dyadic zoom
        # around the incumbent can stall when the minimiser sits off-lattice.
        # Every subset of axes gets its own block so that axes with a kink at
        # the incumbent can stay put while smooth axes move.
        side = F(np.concatenate([arg - h * eye, arg + h * eye]))
        fm, fp = side[:k], side[k:]
        curv = fm - 2.0 * best + fp
        shift = np.where(curv > 0, 0.5 * h * (fm - fp) / np.where(curv > 0, curv, 1.0), 0.0)
        h /= 2.0
        centers = np.unique(arg + masks * np.clip(shift, -2 * h, 2 * h), axis=0)
        local = (centers[:, None, :] + offsets[None, :, :] * h).reshape(-1, k)
        # stay inside the search set so boundary minimisers settle
        local = local[inside(local)]
        lv = F(local)
        j = int(np.argmin(lv))
        change = best - float(lv[j]) if lv[j] < best else 0.0
        if lv[j] < best:
            best, arg = float(lv[j]), local[j]
        history.append(change)
        if len(history) >= 2 and change < refine_tol:
            return best, arg
    raise RefinementError(history)


@dataclass(frozen=True)
class InfConvSpec:
    """f on R^k with |f(x)| <= a + K*phi(|x|); radius/spacing None means automatic."""

    f: Callable[[np.ndarray], np.ndarray]
    a: float
    K: float
    phi: ConvexModulus
    dim: int = 1
    search_radius: float | None = None
    search_spacing: float | None = None
    refine_tol: float = REFINE_TOL
    max_rounds: int = MAX_ROUNDS
    name: str = "custom"

    def __post_init__(self):
        if self.a < 0 or self.K < 0:
            raise ValueError("a and K must be >= 0")
        if self.search_radius is not None and not self.search_radius > 0:
            raise ValueError("search_radius must be > 0")
        if self.search_spacing is not None and not self.search_spacing > 0:
            raise ValueError("search_spacing must be > 0")

    def radius(self, n: int, x: np.ndarray) -> float:
        """Minimisers lie within this distance of x (confinement from the growth bound)."""
        if self.search_radius is not None:
            return self.search_radius
        nx = float(np.linalg.norm(x))
        if n == 1 or self.K == 0:
            return nx + 10.0
        v = (2 * self.a + self.K * float(self.phi(2 * nx)) + 2.0 / n) * 2.0 / ((n - 1) * self.K)
        return nx + self.phi.inverse(v) / 2.0

    def spacing(self, R: float) -> float:
        if self.search_spacing is not None:
            return self.search_spacing
        return R / _INITIAL_STEPS.get(self.dim, 6)

    def growth_bound(self, pts: np.ndarray) -> np.ndarray:
        return self.a + self.K * self.phi(np.linalg.norm(pts, axis=1))

    def to_dict(self) -> dict[str, Any]:
        return {"f": self.name, "a": self.a, "K": self.K, "phi": self.phi.to_dict(),
                "dim": self.dim, "search_radius": self.search_radius,
                "search_spacing": self.search_spacing, "refine_tol": self.refine_tol,
                "max_rounds": self.max_rounds}


def _f_values(spec: InfConvSpec, pts: np.ndarray) -> np.ndarray:
    out = np.asarray(spec.f(pts), dtype=float).reshape(-1)
    return out


def inf_convolution(spec: InfConvSpec, n: int, x) -> float:
    """f_n(x) = inf_u f(u) + (n/2) K phi(2|u - x|), computed on a refined lattice."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != spec.dim:
        raise ValueError(f"x has dimension {x.size}, spec expects {spec.dim}")

    def F(u):
        return _f_values(spec, u) + 0.5 * n * spec.K * spec.phi(2.0 * np.linalg.norm(u - x, axis=1))

    def check(u):
        fu = np.abs(_f_values(spec, u))
        bound = spec.growth_bound(u)
        bad = fu > bound * (1 + RTOL) + ATOL
        if bad.any():
            w = u[np.argmax(bad)]
            raise InfConvSpecError(f"|f| exceeds a + K*phi(|x|) at x={w.tolist()}")

    R = spec.radius(n, x)
    value, _ = lattice_minimize(F, x, R, spec.spacing(R), spec.refine_tol, spec.max_rounds, check)
    return value


# shipped test functions for the approximation experiments
def _square(x):
    return np.sum(x * x, axis=1)


def _abs(x):
    return np.linalg.norm(x, axis=1)


def make_infconv_spec(name: str, dim: int = 1, c: float = 1.0, **kw) -> InfConvSpec:
    from .presets import UnknownPresetError
    if name == "square":
        return InfConvSpec(_square, 0.0, 1.0, ConvexModulus.power(2.0), dim=dim, name=name, **kw)
    if name == "abs":
        return InfConvSpec(_abs, 0.0, 1.0, ConvexModulus.linear(1.0), dim=dim, name=name, **kw)
    if name == "constant":
        c = float(c)
        return InfConvSpec(lambda x: np.full(x.shape[0], c), abs(c), 0.0, ConvexModulus.power(2.0),
                           dim=dim, name=name, **kw)
    raise UnknownPresetError(f"unknown approximation preset {name!r}")


@dataclass(frozen=True)
class SequenceReport:
    """Rows (x, n, f_n, f, bound, gap); clause flags with the first witness."""

    rows: tuple[dict[str, Any], ...]
    bound_ok: bool
    monotone_ok: bool
    gap_shrinks: bool
    final_gap: float
    witness: dict[str, Any] | None = None
    config: dict[str, Any] = field(default_factory=dict)

    columns = ("x", "n", "f_n", "f", "bound", "gap")

    @property
    def passed(self) -> bool:
        return self.bound_ok and self.monotone_ok and self.gap_shrinks

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def csv_rows(self) -> list[dict[str, Any]]:
        return list(self.rows)


def approx_sequence_check(spec: InfConvSpec, x_grid, n_schedule, tol: float = 1e-8
                          ) -> SequenceReport:
    """Check bound (i), monotonicity in n, and a shrinking gap f - f_n on every grid point."""
    ns = [int(n) for n in n_schedule]
    if any(b <= a for a, b in zip(ns, ns[1:])):
        raise ValueError("n_schedule must be strictly increasing")
    xs = np.asarray(x_grid, dtype=float).reshape(len(x_grid), -1)

    def per_point(x):
        fx = float(_f_values(spec, x[None, :])[0])
        return fx, [inf_convolution(spec, n, x) for n in ns]

    results = ordered_map(per_point, list(xs))
    rows, witness = [], None
    bound_ok = monotone_ok = gap_ok = True
    final_gap = 0.0
    for x, (fx, fns) in zip(xs, results):
        xv = float(x[0]) if x.size == 1 else x.tolist()
        bound = spec.a + 0.5 * spec.K * float(spec.phi(2 * np.linalg.norm(x)))
        prev_val = prev_gap = None
        for n, v in zip(ns, fns):
            gap = fx - v
            rows.append({"x": xv, "n": n, "f_n": v, "f": fx, "bound": bound, "gap": gap})
            if abs(v) > bound + spec.refine_tol + tol and bound_ok:
                bound_ok, witness = False, witness or {"clause": "bound", "x": xv, "n": n}
            if prev_val is not None and v < prev_val - tol and monotone_ok:
                monotone_ok, witness = False, witness or {"clause": "monotone", "x": xv, "n": n}
            if prev_gap is not None and abs(gap) > abs(prev_gap) + tol and gap_ok:
                gap_ok, witness = False, witness or {"clause": "gap", "x": xv, "n": n}
            prev_val, prev_gap = v, gap
        final_gap = max(final_gap, abs(prev_gap))
    return SequenceReport(tuple(rows), bound_ok, monotone_ok, gap_ok, final_gap, witness,
                          {"spec": spec.to_dict(), "x_grid": xs.squeeze(-1).tolist()
                           if xs.shape[1] == 1 else xs.tolist(), "n_schedule": ns, "tol": tol})


# --------------------------------------------------------------------------
# localization


@dataclass(frozen=True)
class LocalizationContext:
    y: float
    x: tuple[float, ...]
    q: tuple[float, ...]
    gamma: float
    nu: float

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.atleast_1d(self.x)))
        object.__setattr__(self, "q", tuple(float(v) for v in np.atleast_1d(self.q)))
        if len(self.x) != len(self.q):
            raise ValueError("x and q must have the same dimension")

    @property
    def q_sq(self) -> float:
        return float(np.dot(self.q, self.q))

    @property
    def lam(self) -> float:
        return self.gamma * (1.0 + 2.0 * self.q_sq * self.nu ** 2)

    @classmethod
    def for_problem(cls, gen: GeneratorSpec, coeffs: SdeCoefficients, y: float, x, q
                    ) -> LocalizationContext:
        return cls(y=y, x=x, q=q, gamma=gen.gamma, nu=coeffs.nu)

    def to_dict(self) -> dict[str, Any]:
        return {"y": self.y, "x": list(self.x), "q": list(self.q), "gamma": self.gamma,
                "nu": self.nu, "lambda": self.lam}


@dataclass(frozen=True)
class ProbeSet:
    """Offsets (y_bar - y, z_bar, x_bar - x) on a tensor lattice."""

    dy: tuple[float, ...]
    dz: tuple[float, ...]
    dx: tuple[float, ...]

    @classmethod
    def cube(cls, half_width: float = 2.0, per_axis: int = 10) -> ProbeSet:
        v = tuple(np.linspace(-half_width, half_width, per_axis).tolist())
        return cls(v, v, v)

    def points(self, d: int, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Scalar offsets are applied along every coordinate of z and x."""
        g = np.meshgrid(self.dy, self.dz, self.dx, indexing="ij")
        dy, dz, dx = (a.ravel() for a in g)
        return dy, np.repeat(dz[:, None], d, axis=1), np.repeat(dx[:, None], m, axis=1)


@dataclass(frozen=True)
class LocalizationRow:
    n: int
    psi1: float
    psi2: float
    f_anchor: float
    psi: float
    psi_bound: float
    n_probes: int
    violations: int
    worst_slack: float
    witness: dict[str, Any] | None


@dataclass(frozen=True)
class LocalizationReport:
    rows: tuple[LocalizationRow, ...]
    M: float
    psi_decreasing: bool
    config: dict[str, Any] = field(default_factory=dict)

    columns = ("n", "psi1", "psi2", "f_anchor", "psi", "psi_bound", "n_probes", "violations",
               "worst_slack")

    @property
    def passed(self) -> bool:
        return (self.psi_decreasing
                and all(r.violations == 0 and r.psi <= r.psi_bound for r in self.rows))

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def csv_rows(self) -> list[dict[str, Any]]:
        return [{c: getattr(r, c) for c in self.columns} for r in self.rows]


def _shifted_generator(gen: GeneratorSpec, coeffs: SdeCoefficients, q: np.ndarray, t: float,
                       omega):
    """f(u, v, w) = g(t, u, v + sigma*(t, w) q), vectorised over rows of (u, v, w)."""
    d, m = gen.dim_z, coeffs.dim_x

    def f(u, v, w):
        s = coeffs.diffusion(t, w)                       # (N, m, d)
        z = v + np.einsum("nmd,m->nd", s, q)
        om = None if omega is None else np.broadcast_to(omega, (u.size, d))
        return gen(t, u, z, om)

    return f, d, m


def localization_constant_M(ctx: LocalizationContext, phi: ConvexModulus) -> float:
    """M with psi <= 4 alpha + M: twice the bounds on |psi^1|, |psi^2| and |f(y,0,x)| minus alpha."""
    lam, x_sq = ctx.lam, float(np.dot(ctx.x, ctx.x))
    shift = 2.0 * ctx.gamma * ctx.q_sq * ctx.nu ** 2
    lattice_part = shift + 0.5 * float(phi(2 * abs(ctx.y))) + 2 * lam * x_sq
    anchor_part = shift + float(phi(abs(ctx.y))) + lam * x_sq
    return 2.0 * lattice_part + 2.0 * anchor_part


def generator_localization(gen: GeneratorSpec, ctx: LocalizationContext, coeffs: SdeCoefficients,
                           n_schedule, t: float = 0.0, probes: ProbeSet | None = None,
                           omega=None, tol: float = 1e-6,
                           refine_tol: float = REFINE_TOL) -> LocalizationReport:
    """Lattice sup/inf approximants psi^1_n, psi^2_n and a probe check of the localization bound.

    For every n and probe (y_bar, z_bar, x_bar) we require
    |f(y_bar, z_bar, x_bar) - f(y, 0, x)| <= (n/2) phi(2|y_bar - y|)
        + 2 n lam (|z_bar|^2 + |x_bar - x|^2) + psi^n + tol,
    and psi^n <= 4 alpha_t + M.
    """
    ns = [int(n) for n in n_schedule]
    if not ns or any(n < 1 for n in ns):
        raise ValueError("n_schedule must hold positive integers")
    probes = probes or ProbeSet.cube()
    q = np.asarray(ctx.q)
    x0 = np.asarray(ctx.x)
    f, d, m = _shifted_generator(gen, coeffs, q, t, omega)
    if m != x0.size:
        raise ValueError("context x dimension differs from the SDE state dimension")
    phi, lam = gen.phi, ctx.lam
    alpha_t = float(gen.alpha(t, None if omega is None else np.atleast_2d(omega), n=1)[0])
    f0 = float(f(np.array([ctx.y]), np.zeros((1, d)), x0[None, :])[0])
    M = localization_constant_M(ctx, phi)
    # confinement constant: once the penalty exceeds twice the growth bound,
    # moving further from the anchor cannot pay off
    C = (alpha_t + 2 * ctx.gamma * ctx.q_sq * ctx.nu ** 2 + 0.5 * float(phi(2 * abs(ctx.y)))
         + 2 * lam * float(x0 @ x0) + abs(f0))

    anchor = np.concatenate([[ctx.y], np.zeros(d), x0])

    def split(p):
        return p[:, 0], p[:, 1:1 + d], p[:, 1 + d:]

    def penalty(n, p):
        u, v, w = split(p)
        return (0.5 * n * phi(2 * np.abs(u - ctx.y))
                + 2 * n * lam * (np.sum(v * v, axis=1) + np.sum((w - x0) ** 2, axis=1)))

    dy, dz, dx = probes.points(d, m)
    lhs = np.abs(f(ctx.y + dy, dz, x0 + dx) - f0)
    pen_probe_base = (0.5 * phi(2 * np.abs(dy)), np.sum(dz * dz, axis=1) + np.sum(dx * dx, axis=1))

    def per_n(n):
        if n >= 2:
            ru = phi.inverse(2 * C / (n - 1)) / 2.0
            rv = math.sqrt(C / (2 * lam * (n - 1)))
            radius = np.array([ru] + [rv] * (d + m)) * 1.05 + 1e-3
        else:
            radius = np.full(1 + d + m, 10.0 + float(np.linalg.norm(anchor)))
        h = float(radius.max()) / _INITIAL_STEPS.get(1 + d + m, 6)

        def neg_sup(p):
            u, v, w = split(p)
            return -(f(u, v, w) - penalty(n, p))

        def inf(p):
            u, v, w = split(p)
            return f(u, v, w) + penalty(n, p)

        s1, _ = lattice_minimize(neg_sup, anchor, radius, h, refine_tol)
        psi1 = -s1
        psi2, _ = lattice_minimize(inf, anchor, radius, h, refine_tol)
        psi = abs(psi1 - f0) + abs(psi2 - f0)
        rhs = n * pen_probe_base[0] + 2 * n * lam * pen_probe_base[1] + psi + tol
        slack = lhs - rhs
        bad = slack > 0
        witness = None
        if bad.any():
            i = int(np.argmax(slack))
            witness = {"y_bar": float(ctx.y + dy[i]), "z_bar": dz[i].tolist(),
                       "x_bar": (x0 + dx[i]).tolist(), "lhs": float(lhs[i]), "rhs": float(rhs[i])}
        return LocalizationRow(n=n, psi1=psi1, psi2=psi2, f_anchor=f0, psi=psi,
                               psi_bound=4 * alpha_t + M, n_probes=int(lhs.size),
                               violations=int(bad.sum()), worst_slack=float(slack.max()),
                               witness=witness)

    rows = tuple(ordered_map(per_n, ns))
    psis = [r.psi for r in rows]
    decreasing = all(b <= a + tol for a, b in zip(psis, psis[1:]))
    config = {"generator": gen.to_dict(), "coefficients": coeffs.to_dict(),
              "context": ctx.to_dict(), "n_schedule": ns, "t": t,
              "probes": {"dy": list(probes.dy), "dz": list(probes.dz), "dx": list(probes.dx)},
              "tol": tol, "refine_tol": refine_tol}
    return LocalizationReport(rows, M, decreasing, config)
