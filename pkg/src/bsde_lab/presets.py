"""Shipped generators, forward coefficients and terminal payoffs.

Every preset is continuous in (y, z) by construction, and declares constants
(beta, gamma, phi, alpha) for which the sampled assumption checks pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import AlphaProcess, ConvexModulus, GeneratorSpec, SdeCoefficients


class UnknownPresetError(KeyError):
    pass


def _sq(z: np.ndarray) -> np.ndarray:
    return np.sum(z * z, axis=1)


def zero(dim_z: int = 1) -> GeneratorSpec:
    return GeneratorSpec(lambda t, y, z, om: np.zeros_like(y), beta=0.0, gamma=1.0,
                         phi=ConvexModulus.power(2.0), alpha=AlphaProcess.constant(0.0),
                         dim_z=dim_z, name="zero", params={"dim_z": dim_z})


def linear_y(beta: float = 1.0, dim_z: int = 1) -> GeneratorSpec:
    """g = -beta * y.  A negative ``beta`` gives the increasing driver g = |beta| y."""
    beta = float(beta)
    phi = ConvexModulus.linear(abs(beta)) if beta else ConvexModulus.power(2.0)
    return GeneratorSpec(lambda t, y, z, om: -beta * y, beta=abs(beta), gamma=1.0, phi=phi,
                         alpha=AlphaProcess.constant(0.0), dim_z=dim_z, name="linear_y",
                         params={"beta": beta, "dim_z": dim_z})


def pure_quadratic(gamma: float = 1.0, dim_z: int = 1) -> GeneratorSpec:
    gamma = float(gamma)
    return GeneratorSpec(lambda t, y, z, om: 0.5 * gamma * _sq(z), beta=0.0, gamma=gamma,
                         phi=ConvexModulus.power(2.0), alpha=AlphaProcess.constant(0.0),
                         dim_z=dim_z, name="pure_quadratic", params={"gamma": gamma, "dim_z": dim_z})


def constant(c: float = 1.0, dim_z: int = 1) -> GeneratorSpec:
    """g = c >= 0: the driver equals its own alpha (equality case of the bounds)."""
    c = float(c)
    return GeneratorSpec(lambda t, y, z, om: np.full_like(y, c), beta=0.0, gamma=1.0,
                         phi=ConvexModulus.power(2.0), alpha=AlphaProcess.constant(c),
                         dim_z=dim_z, name="constant", params={"c": c, "dim_z": dim_z})


def mixed(alpha_level: float = 0.5, damping: float = 1.0, c: float = 0.5,
          inner_power: float = 2.0, cap: float = 1.0, gamma: float = 1.0,
          dim_z: int = 1) -> GeneratorSpec:
    """g = a(1 + sin B_t) - damping*y*1{y>0} + c*min(|y|**p, cap) + (gamma/2)|z|^2.

    The capped convex term grows at most linearly (slope c*cap/y0 with
    y0 = cap**(1/p)), which fixes the declared monotonicity constant and the
    declared linear growth modulus.
    """
    a, damping, c, cap, gamma = map(float, (alpha_level, damping, c, cap, gamma))
    inner = ConvexModulus.power(inner_power)
    y0 = inner.inverse(cap)
    slope = c * cap / y0

    def alpha_fn(t, om):
        return a * (1.0 + np.sin(np.asarray(om)[:, 0]))

    alpha = AlphaProcess("path", func=alpha_fn, sup_bound=2.0 * a, assumption_b=True,
                         description=f"{a}*(1+sin(B_t[0]))")

    def g(t, y, z, om):
        n = y.shape[0]
        al = alpha(t, om, n=n)
        return (al - damping * np.maximum(y, 0.0) + c * np.minimum(inner(np.abs(y)), cap)
                + 0.5 * gamma * _sq(z))

    return GeneratorSpec(g, beta=max(0.0, slope - damping), gamma=gamma,
                         phi=ConvexModulus.linear(damping + slope) if damping + slope > 0
                         else ConvexModulus.power(2.0),
                         alpha=alpha, dim_z=dim_z, name="mixed",
                         params={"alpha_level": a, "damping": damping, "c": c,
                                 "inner_power": float(inner_power), "cap": cap,
                                 "gamma": gamma, "dim_z": dim_z})


def shifted(base: GeneratorSpec, shift: float) -> GeneratorSpec:
    """g + shift, with alpha enlarged by |shift| so the growth bound still holds."""
    shift = float(shift)
    base_alpha = base.alpha
    if base_alpha.kind == "constant":
        alpha = AlphaProcess.constant(base_alpha.value + abs(shift))
    else:
        alpha = AlphaProcess("path", func=lambda t, om: base_alpha(t, om) + abs(shift),
                             sup_bound=None if base_alpha.sup_bound is None
                             else base_alpha.sup_bound + abs(shift),
                             assumption_b=base_alpha.satisfies_b,
                             description=f"{base_alpha.description}+{abs(shift)}")
    base_g = base.g
    params = dict(base.params)
    params["shift"] = params.get("shift", 0.0) + shift
    return GeneratorSpec(lambda t, y, z, om: base_g(t, y, z, om) + shift, beta=base.beta,
                         gamma=base.gamma, phi=base.phi, alpha=alpha, dim_z=base.dim_z,
                         name=base.name, params=params)


GENERATORS = {"zero": zero, "linear_y": linear_y, "pure_quadratic": pure_quadratic,
              "constant": constant, "mixed": mixed}


def make_generator(name: str, **params: Any) -> GeneratorSpec:
    shift = params.pop("shift", 0.0)
    try:
        factory = GENERATORS[name]
    except KeyError:
        raise UnknownPresetError(f"unknown generator preset {name!r}") from None
    gen = factory(**params)
    return shifted(gen, shift) if shift else gen


# --------------------------------------------------------------------------
# forward coefficients


def zero_coefficients(dim_x: int = 1, dim_w: int = 1) -> SdeCoefficients:
    return SdeCoefficients(lambda t, x: np.zeros_like(x),
                           lambda t, x: np.zeros((x.shape[0], dim_x, dim_w)),
                           mu=0.0, nu=0.0, dim_x=dim_x, dim_w=dim_w, name="zero",
                           params={"dim_x": dim_x, "dim_w": dim_w})


def brownian(dim: int = 1) -> SdeCoefficients:
    eye = np.eye(dim)
    return SdeCoefficients(lambda t, x: np.zeros_like(x),
                           lambda t, x: np.broadcast_to(eye, (x.shape[0], dim, dim)),
                           mu=0.0, nu=float(np.sqrt(dim)), dim_x=dim, dim_w=dim,
                           name="brownian", params={"dim": dim})


def constant_coefficients(drift=0.0, vol: float = 1.0, dim: int = 1) -> SdeCoefficients:
    b0 = np.broadcast_to(np.asarray(drift, dtype=float), (dim,)).copy()
    s0 = float(vol) * np.eye(dim)
    return SdeCoefficients(lambda t, x: np.broadcast_to(b0, x.shape).copy(),
                           lambda t, x: np.broadcast_to(s0, (x.shape[0], dim, dim)),
                           mu=0.0, nu=float(np.linalg.norm(b0) + abs(vol) * np.sqrt(dim)),
                           dim_x=dim, dim_w=dim, name="constant",
                           params={"drift": b0.tolist(), "vol": float(vol), "dim": dim})


def geometric(theta: float = 0.05, eta: float = 0.2) -> SdeCoefficients:
    theta, eta = float(theta), float(eta)
    k = abs(theta) + abs(eta)
    return SdeCoefficients(lambda t, x: theta * x, lambda t, x: (eta * x)[:, :, None],
                           mu=k, nu=k, name="geometric", params={"theta": theta, "eta": eta})


def sine() -> SdeCoefficients:
    return SdeCoefficients(lambda t, x: np.sin(x), lambda t, x: np.ones((x.shape[0], 1, 1)),
                           mu=1.0, nu=2.0, name="sine", params={})


COEFFICIENTS = {"zero": zero_coefficients, "brownian": brownian,
                "constant": constant_coefficients, "geometric": geometric, "sine": sine}


def make_coefficients(name: str, **params: Any) -> SdeCoefficients:
    try:
        factory = COEFFICIENTS[name]
    except KeyError:
        raise UnknownPresetError(f"unknown coefficient preset {name!r}") from None
    return factory(**params)


# --------------------------------------------------------------------------
# terminal payoffs


@dataclass(frozen=True)
class Terminal:
    """Payoff evaluated on a path bundle at a per-path stopping index.

    kinds: ``constant`` (value), ``brownian_linear`` (z0 . (B_tau - B_0),
    optional clip), ``state_linear`` (y + q . (X_tau - x)).
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("constant", "brownian_linear", "state_linear"):
            raise UnknownPresetError(f"unknown terminal kind {self.kind!r}")

    def __call__(self, bundle, stop_index: np.ndarray | None = None) -> np.ndarray:
        n = bundle.n_paths
        idx = np.full(n, bundle.grid.n_steps) if stop_index is None else np.asarray(stop_index)
        rows = np.arange(n)
        if self.kind == "constant":
            return np.full(n, float(self.params.get("value", 0.0)))
        if self.kind == "brownian_linear":
            z0 = np.atleast_1d(np.asarray(self.params.get("z0", 1.0), dtype=float))
            inc = bundle.brownian[rows, idx] - bundle.brownian[:, 0]
            out = inc @ np.broadcast_to(z0, (inc.shape[1],))
            clip = self.params.get("clip")
            return np.clip(out, clip[0], clip[1]) if clip is not None else out
        if bundle.state is None:
            raise ValueError("state_linear terminal needs simulated state paths")
        q = np.atleast_1d(np.asarray(self.params.get("q", 1.0), dtype=float))
        x = np.atleast_1d(np.asarray(self.params.get("x", 0.0), dtype=float))
        xs = bundle.state[rows, idx]
        return float(self.params.get("y", 0.0)) + (xs - x) @ np.broadcast_to(q, (xs.shape[1],))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "params": dict(self.params)}
