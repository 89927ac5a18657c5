"""Problem specifications, sample-level assumption checks and transformations.

All user functions are vectorised over a leading "probe" axis:

* ``drift(t, x)``: ``x`` of shape ``(P, d)`` -> ``(P, d)``
* ``diffusion(t, x)``: -> ``(P, d, d)``
* ``g(x)``: -> ``(P,)``
* ``f(t, x, y, z)``: ``y`` of shape ``(P,)``, ``z`` of shape ``(P, d)`` -> ``(P,)``
* ``h(t, x)``: -> ``(P,)``

``t`` is either a scalar or an array of shape ``(P,)``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .expr import Expression


class IllPosedSpecError(ValueError):
    """A user function returned a non-finite value at a probe point."""


# --------------------------------------------------------------------------
# domain types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DiffusionSpec:
    dimension: int
    drift: Callable
    diffusion: Callable
    drift_lipschitz: Optional[float] = None
    diffusion_lipschitz: Optional[float] = None

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise ValueError("dimension must be a positive integer")

    def b(self, t, x):
        x = np.asarray(x, dtype=float)
        return _as_shape(self.drift(t, x), x.shape)

    def sigma(self, t, x):
        x = np.asarray(x, dtype=float)
        return _as_shape(self.diffusion(t, x), x.shape + (self.dimension,))


@dataclass(frozen=True)
class DriverSpec:
    """Driver ``f(t, x, y, z)`` with its declared structural constants.

    ``mu`` is the one-sided (monotonicity) constant in ``y``, ``k`` the
    Lipschitz constant in ``z`` and ``phi(r) = kappa1 * (1 + r**beta1)`` the
    growth function in ``y``.
    """

    f: Callable
    mu: float = 0.0
    k: float = 0.0
    kappa1: Optional[float] = None
    beta1: Optional[float] = None
    base_square_integrable: bool = True
    depends_on_z: Optional[bool] = None

    def __call__(self, t, x, y, z):
        y = np.asarray(y, dtype=float)
        return _as_shape(self.f(t, x, y, z), y.shape)

    def phi(self, r):
        if self.kappa1 is None or self.beta1 is None:
            raise ValueError("growth function not declared (kappa1, beta1)")
        return self.kappa1 * (1.0 + np.abs(r) ** self.beta1)

    @property
    def uses_z(self):
        if self.depends_on_z is not None:
            return self.depends_on_z
        return self.k > 0


@dataclass(frozen=True)
class TerminalSpec:
    g: Callable
    growth: Optional[float] = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return _as_shape(self.g(x), x.shape[:-1])


@dataclass(frozen=True)
class ObstacleSpec:
    h: Callable
    kappa: float = 1.0
    beta: float = 0.0

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return _as_shape(self.h(t, x), x.shape[:-1])


@dataclass(frozen=True)
class WeightSpec:
    """``rho(x) = (1+|x|)^-p`` (polynomial) or ``exp(alpha*|x|)`` (exponential)."""

    family: str = "polynomial"
    p: float = 2.0
    alpha: float = -1.0

    def __post_init__(self):
        if self.family not in ("polynomial", "exponential"):
            raise ValueError(f"unknown weight family {self.family!r}")

    def radial(self, r):
        r = np.abs(np.asarray(r, dtype=float))
        if self.family == "polynomial":
            return (1.0 + r) ** (-self.p)
        return np.exp(self.alpha * r)

    def __call__(self, x):
        """Weight at points ``x`` of shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        return self.radial(np.linalg.norm(x, axis=-1))

    def log(self, x):
        return np.log(self(x))


@dataclass(frozen=True)
class ProblemSpec:
    diffusion: DiffusionSpec
    terminal: TerminalSpec
    driver: DriverSpec
    weight: WeightSpec = field(default_factory=WeightSpec)
    horizon: float = 1.0
    obstacle: Optional[ObstacleSpec] = None
    name: str = ""

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError("horizon T must be positive")

    @property
    def dimension(self):
        return self.diffusion.dimension

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _as_shape(value, shape):
    value = np.asarray(value, dtype=float)
    if value.shape == shape:
        return value
    return np.broadcast_to(value, shape).copy()


# --------------------------------------------------------------------------
# construction from expression strings
# --------------------------------------------------------------------------


def _scalar_fn(source, variables, params, d):
    expr = Expression(source, variables, params)

    def evaluate(*args):
        values = {}
        for name, arg in zip(variables, args):
            if name in ("x", "z"):
                arg = np.asarray(arg, dtype=float)
                values[name] = arg[..., 0] if d == 1 else arg
            else:
                values[name] = arg
        return expr(**values)

    evaluate.expression = expr
    return evaluate


def diffusion_from_expressions(drift, diffusion, dimension=1, params=None, **bounds):
    """Build a :class:`DiffusionSpec` from expression strings.

    For ``dimension == 1`` ``drift`` and ``diffusion`` are single strings.
    Otherwise ``drift`` is a list of ``d`` strings and ``diffusion`` a
    ``d x d`` nested list.
    """
    d = int(dimension)
    if d == 1:
        drift, diffusion = [drift], [[diffusion]]
    drift_fns = [_scalar_fn(src, ("t", "x"), params, d) for src in drift]
    sigma_fns = [[_scalar_fn(src, ("t", "x"), params, d) for src in row] for row in diffusion]

    def b(t, x):
        shape = x.shape[:-1]
        return np.stack([_as_shape(fn(t, x), shape) for fn in drift_fns], axis=-1)

    def sigma(t, x):
        shape = x.shape[:-1]
        rows = [np.stack([_as_shape(fn(t, x), shape) for fn in row], axis=-1) for row in sigma_fns]
        return np.stack(rows, axis=-2)

    return DiffusionSpec(d, b, sigma, **bounds)


def terminal_from_expression(source, dimension=1, params=None, growth=None):
    return TerminalSpec(_scalar_fn(source, ("x",), params, dimension), growth=growth)


def driver_from_expression(source, dimension=1, params=None, **constants):
    fn = _scalar_fn(source, ("t", "x", "y", "z"), params, dimension)
    constants.setdefault("depends_on_z", fn.expression.depends_on("z"))
    return DriverSpec(fn, **constants)


def obstacle_from_expression(source, dimension=1, params=None, kappa=1.0, beta=0.0):
    return ObstacleSpec(_scalar_fn(source, ("t", "x"), params, dimension), kappa=kappa, beta=beta)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass
class ProbePlan:
    """Quasi-random probe plan over a box in ``(t, x, y, z)``."""

    x_lo: float | list = -2.0
    x_hi: float | list = 2.0
    y_lo: float = -2.0
    y_hi: float = 2.0
    z_lo: float = -2.0
    z_hi: float = 2.0
    n: int = 10_000
    seed: int = 0


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float = 0.0
    probe: Optional[dict] = None
    note: str = ""


@dataclass
class ValidationReport:
    checks: list

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def __getitem__(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]


def required_weight_exponent(driver, obstacle, dimension):
    """Smallest admissible polynomial weight exponent for obstacle problems."""
    beta1 = driver.beta1 if driver.beta1 is not None else 1.0
    return beta1 * obstacle.beta + obstacle.beta + dimension + 1


def _finite_or_raise(values, name, probes):
    values = np.asarray(values)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = np.argwhere(bad)[0][0]
        probe = {k: np.asarray(v)[idx].tolist() for k, v in probes.items()}
        raise IllPosedSpecError(f"ill-posed spec: {name} is not finite at probe {probe}")


def _exceeds(lhs, rhs, tol):
    return lhs - rhs - tol * (1.0 + np.abs(lhs) + np.abs(rhs))


def _worst(name, excess, value, probes):
    i = int(np.argmax(excess))
    passed = bool(excess[i] <= 0)
    probe = {k: np.asarray(v)[i].tolist() for k, v in probes.items()}
    return CheckResult(name, passed, float(value[i]), probe)


def validate_problem(spec, probes=None, tol=1e-9):
    """Check the structural assumptions of ``spec`` on quasi-random probes.

    Returns a :class:`ValidationReport` with one entry per invariant. The
    ``worst`` field holds the largest observed quotient (Lipschitz or
    monotonicity) or the largest raw violation for the other checks.
    """
    probes = probes or ProbePlan()
    if probes.n < 1:
        raise ValueError("probe plan needs at least one point")
    if not tol > 0:
        raise ValueError("tol must be positive")

    d = spec.dimension
    T = spec.horizon
    n = probes.n
    lo = np.broadcast_to(np.asarray(probes.x_lo, float), (d,))
    hi = np.broadcast_to(np.asarray(probes.x_hi, float), (d,))
    # columns: t, x, x', y, y', z, z'
    sob = qmc.Sobol(1 + 4 * d + 2, scramble=True, seed=probes.seed)
    u = sob.random_base2(max(1, math.ceil(math.log2(n))))[:n]
    t = u[:, 0] * T
    x = lo + (hi - lo) * u[:, 1:1 + d]
    x2 = lo + (hi - lo) * u[:, 1 + d:1 + 2 * d]
    y = probes.y_lo + (probes.y_hi - probes.y_lo) * u[:, 1 + 2 * d]
    y2 = probes.y_lo + (probes.y_hi - probes.y_lo) * u[:, 2 + 2 * d]
    z = probes.z_lo + (probes.z_hi - probes.z_lo) * u[:, 3 + 2 * d:3 + 3 * d]
    z2 = probes.z_lo + (probes.z_hi - probes.z_lo) * u[:, 3 + 3 * d:3 + 4 * d]
    zero_y = np.zeros(n)
    zero_z = np.zeros((n, d))
    pts = {"t": t, "x": x, "y": y, "z": z}
    checks = [CheckResult("horizon.positive", T > 0, T)]

    # diffusion
    dif = spec.diffusion
    bx, bx2 = dif.b(t, x), dif.b(t, x2)
    sx, sx2 = dif.sigma(t, x), dif.sigma(t, x2)
    for name, val in (("drift", bx), ("drift", bx2), ("diffusion", sx), ("diffusion", sx2)):
        _finite_or_raise(val.reshape(n, -1).sum(axis=1), name, pts)
    checks.append(CheckResult("diffusion.finite", True))
    dx = np.linalg.norm(x - x2, axis=1)
    ok = dx > 0
    for name, a, b_, bound in (
        ("diffusion.drift_lipschitz", bx, bx2, dif.drift_lipschitz),
        ("diffusion.sigma_lipschitz", sx, sx2, dif.diffusion_lipschitz),
    ):
        diff = np.linalg.norm((a - b_).reshape(n, -1), axis=1)
        q = np.where(ok, diff / np.where(ok, dx, 1.0), 0.0)
        if bound is None:
            checks.append(CheckResult(name, True, float(q.max()), note="no bound declared"))
        else:
            checks.append(_worst(name, q - 1.01 * bound, q, {"t": t, "x": x, "x'": x2}))

    # terminal
    gx = spec.terminal(x)
    _finite_or_raise(gx, "terminal g", {"x": x})
    checks.append(CheckResult("terminal.finite", True, float(np.abs(gx).max())))
    vol = float(np.prod(hi - lo))
    integral = float(np.mean(gx ** 2 * spec.weight(x)) * vol)
    checks.append(CheckResult("terminal.weighted_l2", bool(np.isfinite(integral)), integral))

    # driver
    drv = spec.driver
    fy = drv(t, x, y, z)
    fy2 = drv(t, x, y2, z)
    fz2 = drv(t, x, y, z2)
    f00 = drv(t, x, zero_y, zero_z)
    fy0 = drv(t, x, y, zero_z)
    for val in (fy, fy2, fz2, f00, fy0):
        _finite_or_raise(val, "driver f", pts)
    checks.append(CheckResult("driver.finite", True))
    dy = y - y2
    lhs = dy * (fy - fy2)
    rhs = drv.mu * dy ** 2
    quotient = np.where(dy != 0, lhs / np.where(dy != 0, dy ** 2, 1.0), -np.inf)
    checks.append(_worst("driver.monotonicity", _exceeds(lhs, rhs, tol), quotient,
                         {"t": t, "x": x, "y": y, "y'": y2, "z": z}))
    dz = np.linalg.norm(z - z2, axis=1)
    lhs = np.abs(fy - fz2)
    rhs = drv.k * dz
    quotient = np.where(dz > 0, lhs / np.where(dz > 0, dz, 1.0), 0.0)
    checks.append(_worst("driver.z_lipschitz", _exceeds(lhs, rhs, tol), quotient,
                         {"t": t, "x": x, "y": y, "z": z, "z'": z2}))
    if drv.kappa1 is not None and drv.beta1 is not None:
        lhs = np.abs(fy0)
        rhs = np.abs(f00) + drv.phi(np.abs(y))
        checks.append(_worst("driver.growth", _exceeds(lhs, rhs, tol), lhs - rhs, {"t": t, "x": x, "y": y}))
    else:
        checks.append(CheckResult("driver.growth", True, note="growth not declared"))

    # weight
    rho = spec.weight(x)
    checks.append(CheckResult("weight.positive", bool(np.all(rho > 0) and np.all(np.isfinite(rho))),
                              float(rho.min())))

    # obstacle
    obs = spec.obstacle
    if obs is not None:
        hT = obs(np.full(n, T), x)
        hx = obs(t, x)
        _finite_or_raise(hT, "obstacle h", {"x": x})
        _finite_or_raise(hx, "obstacle h", {"t": t, "x": x})
        checks.append(CheckResult("obstacle.finite", True))
        checks.append(_worst("obstacle.compatibility", _exceeds(hT, gx, tol), hT - gx, {"x": x}))
        bound = obs.kappa * (1.0 + np.linalg.norm(x, axis=1) ** obs.beta)
        checks.append(_worst("obstacle.growth", _exceeds(np.abs(hx), bound, tol), np.abs(hx) - bound,
                             {"t": t, "x": x}))
        if spec.weight.family == "polynomial":
            need = required_weight_exponent(drv, obs, d)
            checks.append(CheckResult("weight.admissible", bool(spec.weight.p >= need), spec.weight.p,
                                      note=f"requires p >= {need:g}"))
        else:
            checks.append(CheckResult("weight.admissible", True, note="exponential family not covered"))
    return ValidationReport(checks)


# --------------------------------------------------------------------------
# transformations
# --------------------------------------------------------------------------


def exponential_shift(spec, mu):
    """Return the problem solved by ``e^{mu t} u``.

    ``g -> e^{mu T} g``, ``f -> e^{mu t} f(t, x, e^{-mu t} y, e^{-mu t} z) - mu y``
    and ``h -> e^{mu t} h``. The shifted driver's monotonicity constant is
    ``spec.driver.mu - mu``; the growth constants are dropped.
    """
    mu = float(mu)
    if mu == 0.0:
        return spec
    T = spec.horizon
    g0, f0 = spec.terminal, spec.driver
    scale_T = math.exp(mu * T)

    def g(x):
        return scale_T * g0(x)

    def f(t, x, y, z):
        e = np.exp(mu * np.asarray(t, dtype=float))
        e_z = e[..., None] if np.ndim(e) else e
        return e * f0(t, x, y / e, np.asarray(z) / e_z) - mu * y

    terminal = TerminalSpec(g, growth=spec.terminal.growth)
    driver = dataclasses.replace(f0, f=f, mu=f0.mu - mu, kappa1=None, beta1=None)
    obstacle = None
    if spec.obstacle is not None:
        h0 = spec.obstacle

        def h(t, x):
            return np.exp(mu * np.asarray(t, dtype=float)) * h0(t, x)

        obstacle = ObstacleSpec(h, kappa=h0.kappa * math.exp(abs(mu) * T), beta=h0.beta)
    return spec.replace(terminal=terminal, driver=driver, obstacle=obstacle)


def unshift(values, t, mu):
    """Map solution values of the shifted problem back: ``e^{-mu t} * values``."""
    return np.exp(-mu * np.asarray(t, dtype=float)) * values


def clamp(value, lo, hi):
    return np.minimum(np.maximum(value, lo), hi)


def project_ball(value, n):
    """``min(n, |y|) y / |y|``, the radial projection on the ball of radius ``n``."""
    return clamp(value, -n, n)


class _TruncatedDriver:
    def __init__(self, base, lo, hi):
        self.base, self.lo, self.hi = base, lo, hi

    def __call__(self, t, x, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        full = self.base(t, x, y, z)
        base0 = self.base(t, x, np.zeros_like(y), np.zeros_like(z))
        return full - base0 + clamp(base0, self.lo, self.hi)


class _TruncatedTerminal:
    def __init__(self, base, lo, hi):
        self.base, self.lo, self.hi = base, lo, hi

    def __call__(self, x):
        return clamp(self.base(x), self.lo, self.hi)


def truncate_terminal_and_driver(spec, n, m=None, symmetric=False):
    """Clamp ``g`` to ``[-m, n]`` and the base value ``f(t,x,0,0)`` likewise.

    With ``symmetric=True`` (or ``m`` omitted) the bounds are ``[-n, n]``.
    Truncating an already truncated spec intersects the bounds, so repeating
    the same truncation is an exact no-op.
    """
    if symmetric or m is None:
        m = n
    if not (n > 0 and m > 0):
        raise ValueError("truncation levels must be positive")
    lo, hi = -float(m), float(n)

    g = spec.terminal.g
    if isinstance(g, _TruncatedTerminal):
        g = _TruncatedTerminal(g.base, max(lo, g.lo), min(hi, g.hi))
    else:
        g = _TruncatedTerminal(g, lo, hi)
    f = spec.driver.f
    if isinstance(f, _TruncatedDriver):
        f = _TruncatedDriver(f.base, max(lo, f.lo), min(hi, f.hi))
    else:
        f = _TruncatedDriver(f, lo, hi)
    return spec.replace(
        terminal=dataclasses.replace(spec.terminal, g=g),
        driver=dataclasses.replace(spec.driver, f=f),
    )


def truncate_obstacle(obstacle, n):
    """Obstacle ``min(h, n)`` with the growth constants kept."""
    base = obstacle.h
    cap = float(n)

    def h(t, x):
        return np.minimum(base(t, x), cap)

    return dataclasses.replace(obstacle, h=h)
