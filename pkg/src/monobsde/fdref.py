"""One-dimensional finite-difference reference solvers.

Each backward step from ``t_{n+1}`` to ``t_n`` is split in two:

1. reaction, per node and implicit in ``u`` (``z`` lagged)::

       w - theta dt f(t_n, x, w, z) = u^{n+1} + (1 - theta) dt f(t_{n+1}, x, u^{n+1}, z)

2. diffusion, ``(I - theta dt L) u^n = (I + (1 - theta) dt L) w``, with the
   obstacle entering here either as a penalty or as a complementarity
   constraint.

``L u = b u_x + 1/2 sigma^2 u_xx`` uses central differences for the drift
where the cell Peclet number allows it and upwinding elsewhere, so that
``I - dt L`` is an M-matrix.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numba
import numpy as np
from scipy.linalg import solve_banded

from .bsde import BracketError, implicit_driver_step


class FdError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FdGrid:
    x_lo: float
    x_hi: float
    nx: int = 400
    nt: int = 400
    boundary: str = "dirichlet"

    def __post_init__(self):
        if self.nx < 3:
            raise ValueError("need at least 3 spatial nodes")
        if self.nt < 1:
            raise ValueError("need at least one time step")
        if not self.x_hi > self.x_lo:
            raise ValueError("empty spatial interval")
        if self.boundary not in ("dirichlet", "clamped-gradient"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")

    @property
    def x(self):
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / (self.nx - 1)


@dataclass
class FdSolution:
    """``u[n, k]`` at time ``t[n]`` and node ``x[k]``.

    ``du`` is ``sigma * u_x``; ``multiplier[n, k]`` is the mass of the
    discrete reflecting measure in the cell of node ``k`` over step ``n``
    (zero for plain runs).
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    du: np.ndarray
    multiplier: np.ndarray
    contact: np.ndarray
    grid: FdGrid
    theta: float
    method: str = "plain"

    def at(self, x, n=0):
        return np.interp(x, self.x, self.u[n])

    def du_at(self, x, n=0):
        return np.interp(x, self.x, self.du[n])

    def to_csv(self, path):
        """Columns ``t, x, u, du, multiplier_mass``; grid metadata in ``<path>.json``."""
        nt = self.t.size - 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "u", "du", "multiplier_mass"])
            for n in range(nt + 1):
                mass = self.multiplier[n] if n < nt else np.zeros(self.x.size)
                for k in range(self.x.size):
                    w.writerow([repr(float(self.t[n])), repr(float(self.x[k])), repr(float(self.u[n, k])),
                                repr(float(self.du[n, k])), repr(float(mass[k]))])
        meta = dict(asdict(self.grid), theta=self.theta, method=self.method,
                    t0=float(self.t[0]), T=float(self.t[-1]))
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# operator assembly
# --------------------------------------------------------------------------


def _operator(diffusion, t, grid):
    """Tridiagonal ``L`` as (lower, diag, upper); boundary rows are zero."""
    x = grid.x
    dx = grid.dx
    pts = x[:, None]
    b = diffusion.b(t, pts)[:, 0]
    s = diffusion.sigma(t, pts)[:, 0, 0]
    a = s * s
    central = np.abs(b) * dx <= a
    lower = np.where(central, a / (2 * dx * dx) - b / (2 * dx), a / (2 * dx * dx) + np.maximum(-b, 0.0) / dx)
    upper = np.where(central, a / (2 * dx * dx) + b / (2 * dx), a / (2 * dx * dx) + np.maximum(b, 0.0) / dx)
    diag = -(lower + upper)
    for arr in (lower, diag, upper):
        arr[0] = arr[-1] = 0.0
    return lower, diag, upper, s


def _banded(lower, diag, upper, scale):
    """Banded storage of ``I - scale * L``."""
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = -scale * upper[:-1]
    ab[1] = 1.0 - scale * diag
    ab[2, :-1] = -scale * lower[1:]
    return ab


def _apply(lower, diag, upper, scale, v):
    """``(I + scale * L) v``."""
    out = v + scale * diag * v
    out[1:] += scale * lower[1:] * v[:-1]
    out[:-1] += scale * upper[:-1] * v[1:]
    return out


def _matvec(ab, v):
    out = ab[1] * v
    out[:-1] += ab[0, 1:] * v[1:]
    out[1:] += ab[2, :-1] * v[:-1]
    return out


def _solve(ab, rhs):
    try:
        u = solve_banded((1, 1), ab, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FdError(f"tridiagonal solve failed: {exc}") from exc
    if not np.all(np.isfinite(u)):
        raise FdError("tridiagonal solve produced non-finite values")
    return u


def _gradient(u, dx):
    return np.gradient(u, dx)


@numba.njit(cache=True)
def _psor(ab, rhs, h, u, omega, tol, max_sweeps):
    n = u.size
    for sweep in range(max_sweeps):
        change = 0.0
        for k in range(n):
            acc = rhs[k]
            if k > 0:
                acc -= ab[2, k - 1] * u[k - 1]
            if k < n - 1:
                acc -= ab[0, k + 1] * u[k + 1]
            gs = acc / ab[1, k]
            new = u[k] + omega * (gs - u[k])
            if new < h[k]:
                new = h[k]
            if new < u[k]:
                # iterates from a subsolution only increase
                new = u[k]
            rel = (new - u[k]) / (1.0 + abs(new))
            if rel > change:
                change = rel
            u[k] = new
        if change <= tol:
            return sweep + 1
    return -1


def _penalty_solve(ab, rhs, h, n_pen, dt, max_iter=200):
    """Solve ``(I - dt L) u - dt n (h - u)^+ = rhs`` by active-set iteration."""
    u = _solve(ab, rhs)
    active = u < h
    if not active.any():
        return u
    for _ in range(max_iter):
        ab2 = ab.copy()
        ab2[1] += dt * n_pen * active
        u = _solve(ab2, rhs + dt * n_pen * h * active)
        new_active = u < h
        if np.array_equal(new_active, active):
            return u
        active = new_active
    raise FdError("penalty active-set iteration did not converge")


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------


def _march(problem, grid, theta, obstacle=None, method="plain", n_penalty=0.0, rannacher=2,
           tol=1e-12, omega=1.0, max_sweeps=100_000):
    if problem.dimension != 1:
        raise ValueError("finite-difference reference is one-dimensional")
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [1/2, 1]")
    T = problem.horizon
    nt, nx = grid.nt, grid.nx
    dt = T / nt
    if dt * max(problem.driver.mu, 0.0) >= 1.0:
        raise ValueError("need dt * max(mu, 0) < 1 for the nonlinear step")
    t = np.linspace(0.0, T, nt + 1)
    x = grid.x
    pts = x[:, None]
    dx = grid.dx
    f = problem.driver

    u = np.empty((nt + 1, nx))
    du = np.empty((nt + 1, nx))
    mult = np.zeros((nt, nx))
    u[nt] = problem.terminal(pts)
    g_grad = u[nt, 1] - u[nt, 0], u[nt, -1] - u[nt, -2]
    _, _, _, s = _operator(problem.diffusion, T, grid)
    du[nt] = s * _gradient(u[nt], dx)

    for n in range(nt - 1, -1, -1):
        th = 1.0 if (nt - 1 - n) < rannacher and theta < 1.0 else theta
        prev = u[n + 1]
        z = du[n + 1][:, None]
        # reaction
        rhs = prev.copy()
        if th < 1.0:
            rhs = rhs + (1.0 - th) * dt * f(t[n + 1], pts, prev, z)
        try:
            w = implicit_driver_step(rhs, t[n], pts, z, th * dt, f, tol=tol, mu=f.mu)
        except BracketError as exc:
            raise FdError(f"nonlinear step failed at t={t[n]:g}: {exc}") from exc
        if not np.all(np.isfinite(w)):
            k = int(np.argwhere(~np.isfinite(w))[0][0])
            raise FdError(f"nonlinear step diverged at node x={x[k]:g}, t={t[n]:g}")
        # diffusion
        lo_l, dg_l, up_l, s = _operator(problem.diffusion, t[n], grid)
        ab = _banded(lo_l, dg_l, up_l, th * dt)
        b_rhs = _apply(lo_l, dg_l, up_l, (1.0 - th) * dt, w) if th < 1.0 else w.copy()
        if grid.boundary == "clamped-gradient":
            # u_0 - u_1 and u_{-1} - u_{-2} held at their terminal values
            ab[1, 0], ab[0, 1] = 1.0, -1.0
            ab[1, -1], ab[2, -2] = 1.0, -1.0
            b_rhs[0], b_rhs[-1] = -g_grad[0], g_grad[1]
        if obstacle is None or method == "plain":
            un = _solve(ab, b_rhs)
        else:
            h = obstacle(t[n], pts)
            if method == "penalized":
                un = _solve(ab, b_rhs) if n_penalty == 0 else _penalty_solve(ab, b_rhs, h, n_penalty, dt)
                mult[n] = n_penalty * np.maximum(h - un, 0.0) * dt * dx
            else:
                un = _solve(ab, b_rhs)
                if np.any(un < h):
                    start = np.maximum(un, h)
                    sweeps = _psor(ab, b_rhs, h, start, omega, tol, max_sweeps)
                    if sweeps < 0:
                        raise FdError(f"projected SOR did not converge at t={t[n]:g}")
                    un = start
                    lam = _matvec(ab, un) - b_rhs
                    on = un - h < 1e-9 * (1.0 + np.abs(h))
                    mult[n] = np.where(on, np.maximum(lam, 0.0), 0.0) * dx
        u[n] = un
        du[n] = s * _gradient(un, dx)
    if obstacle is not None:
        hs = np.stack([obstacle(tn, pts) for tn in t])
        contact = u - hs < 1e-9 * (1.0 + np.abs(hs))
    else:
        contact = np.zeros_like(u, dtype=bool)
    return FdSolution(t=t, x=x, u=u, du=du, multiplier=mult, contact=contact, grid=grid, theta=theta,
                      method=method)


def solve_pde_fd(problem, grid, theta=1.0, rannacher=2):
    """Solve ``u_t + L u + f(t, x, u, sigma u_x) = 0``, ``u(T) = g`` backward.

    With ``theta < 1`` the first ``rannacher`` steps are fully implicit to
    damp the terminal kink.
    """
    return _march(problem, grid, theta, rannacher=rannacher)


def solve_obstacle_fd(problem, obstacle, grid, method="projected-sor", n_penalty=None, theta=1.0,
                      tol=1e-12, omega=1.0):
    """Obstacle problem ``u >= h`` by penalty (``method="penalized"``) or
    projected SOR on the complementarity form (``method="projected-sor"``).

    ``multiplier`` records ``n (u - h)^- dt dx`` for the penalty and
    ``((I - dt L) u - rhs)^+ dx`` on the contact set for projected SOR.
    """
    if method not in ("penalized", "projected-sor"):
        raise ValueError(f"unknown obstacle method {method!r}")
    if method == "penalized" and (n_penalty is None or n_penalty < 0):
        raise ValueError("penalized method needs n_penalty >= 0")
    pts = grid.x[:, None]
    if np.any(obstacle(problem.horizon, pts) > problem.terminal(pts) + 1e-12):
        raise ValueError("obstacle exceeds the terminal condition")
    return _march(problem, grid, theta, obstacle=obstacle, method=method,
                  n_penalty=float(n_penalty or 0.0), tol=tol, omega=omega)


# --------------------------------------------------------------------------
# Feynman-Kac comparison
# --------------------------------------------------------------------------


@dataclass
class CompareReport:
    u_distance: float
    u_norm: float
    z_distance: float
    z_norm: float
    z_scores: np.ndarray
    fd_values: np.ndarray
    mc_values: np.ndarray

    @property
    def relative_u(self):
        return self.u_distance / self.u_norm if self.u_norm > 0 else self.u_distance

    @property
    def relative_z(self):
        return self.z_distance / self.z_norm if self.z_norm > 0 else self.z_distance

    def fraction_within(self, k=3.0):
        return float(np.mean(np.abs(self.z_scores) <= k))


def feynman_kac_compare(fd, mc, points, weight, region=None):
    """Weighted discrete L2 distances between the FD and Monte Carlo fields at ``t_0``.

    ``mc`` is a :class:`~monobsde.bsde.BackwardSolution` whose initial
    points are ``points``. ``region = (lo, hi)`` defaults to the FD interval.
    """
    pts = np.asarray(points, dtype=float).reshape(-1)
    lo, hi = region if region is not None else (fd.x[0], fd.x[-1])
    if lo < fd.x[0] or hi > fd.x[-1]:
        raise ValueError(f"region [{lo:g}, {hi:g}] exceeds the FD grid [{fd.x[0]:g}, {fd.x[-1]:g}]")
    if np.any(pts < lo) or np.any(pts > hi):
        raise ValueError("Monte Carlo points lie outside the comparison region")
    rho = weight(pts[:, None])
    u_fd = fd.at(pts)
    z_fd = fd.du_at(pts)
    u_mc = np.asarray(mc.u, dtype=float)
    z_mc = np.asarray(mc.z0, dtype=float)[:, 0]
    se = np.asarray(mc.u_se, dtype=float)
    diff = u_mc - u_fd
    zs = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff == 0, 0.0, np.inf))
    return CompareReport(
        u_distance=math.sqrt(float(np.sum(rho * diff ** 2))),
        u_norm=math.sqrt(float(np.sum(rho * u_fd ** 2))),
        z_distance=math.sqrt(float(np.sum(rho * (z_mc - z_fd) ** 2))),
        z_norm=math.sqrt(float(np.sum(rho * z_fd ** 2))),
        z_scores=zs,
        fd_values=u_fd,
        mc_values=u_mc,
    )
