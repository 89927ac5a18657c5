"""Backward regression scheme for BSDEs with monotone drivers.

The scheme is explicit in ``z`` and implicit in ``y``::

    Z_i = E[(Y_{i+1} - c) dB_i | X_i] / dt_i
    e_i = E[Y_{i+1} + (1-theta) dt_i f_{i+1} - Z_i . dB_i | X_i]
    Y_i - theta dt_i f(t_i, X_i, Y_i, Z_i) = e_i

``c`` is the sample mean of ``Y_{i+1}``. It and the ``- Z_i . dB_i`` control
term have zero conditional mean and only reduce the regression variance;
the control uses leave-one-out predictions of ``Z_i`` so that no path's own
increment enters its control. ``theta = 1`` is backward Euler in the driver,
``theta = 1/2`` the trapezoidal rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .regression import BasisSpec, regress

EPS = np.finfo(float).eps


class BracketError(ArithmeticError):
    """The implicit step could not bracket a root (monotonicity violated)."""


class SolverError(ArithmeticError):
    pass


class NoContractionError(ArithmeticError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class SolverOptions:
    tol: float = 1e-12
    max_iter: int = 100
    control_variate: bool = True
    theta: float = 1.0


@dataclass
class BackwardSolution:
    """Per-path solution arrays.

    ``Y`` and ``K`` have shape ``(J, M, N+1)``; ``Z`` has shape
    ``(J, M, N, d)`` (defined on the left endpoint of each step).
    ``se`` holds the Monte Carlo standard error of ``mean_m Y[j, :, i]``.
    """

    Y: np.ndarray
    Z: np.ndarray
    K: np.ndarray
    se: np.ndarray
    coefficients: list
    meta: dict = field(default_factory=dict)

    @property
    def u(self):
        """Estimates of ``u(t_0, x_j)``."""
        return self.Y[:, :, 0].mean(axis=1)

    @property
    def u_se(self):
        return self.se[:, 0]

    @property
    def z0(self):
        """Estimates of ``sigma^T grad u(t_0, x_j)``."""
        return self.Z[:, :, 0, :].mean(axis=1)

    def mean_Y(self):
        return self.Y.mean(axis=1)


# --------------------------------------------------------------------------
# implicit scalar step
# --------------------------------------------------------------------------


def implicit_driver_step(e, t, x, z, dt, driver, tol=1e-12, max_iter=100, mu=None, return_residual=False):
    """Solve ``y - dt * f(t, x, y, z) = e`` elementwise.

    ``e`` has shape ``(P,)``, ``x`` and ``z`` shape ``(P, d)``. The map is
    strictly increasing when ``dt * max(mu, 0) < 1``; a safeguarded Newton
    iteration (finite-difference slope) runs inside a bracket that is
    shrunk on every step, with bisection whenever Newton leaves it.
    """
    e = np.atleast_1d(np.asarray(e, dtype=float))
    x = np.asarray(x, dtype=float).reshape(e.shape[0], -1)
    z = np.asarray(z, dtype=float).reshape(e.shape[0], -1)
    t = np.broadcast_to(np.asarray(t, dtype=float), e.shape)
    mu = getattr(driver, "mu", 0.0) if mu is None else mu
    if dt * max(mu, 0.0) >= 1.0:
        raise ValueError("implicit step requires dt * max(mu, 0) < 1")

    def G(y, idx):
        return y - dt * driver(t[idx], x[idx], y, z[idx]) - e[idx]

    every = np.arange(e.size)
    y = e.copy()
    g = G(y, every)
    resid = np.abs(g)
    active = np.flatnonzero(resid > tol)
    if active.size == 0:
        return (y, resid) if return_residual else y

    # strong monotonicity: |y* - e| <= |G(e)| / (1 - dt*mu+)
    slope_lb = 1.0 - dt * max(mu, 0.0)
    ga = g[active]
    reach = np.abs(ga) / slope_lb * (1.0 + 1e-6) + 1e-300
    lo = np.where(ga < 0, y[active], y[active] - reach)
    hi = np.where(ga < 0, y[active] + reach, y[active])
    glo = G(lo, active)
    ghi = G(hi, active)
    for _ in range(200):
        bad = (glo > 0) | (ghi < 0)
        if not bad.any():
            break
        width = hi - lo
        lo = np.where(glo > 0, lo - 2 * width, lo)
        hi = np.where(ghi < 0, hi + 2 * width, hi)
        glo = G(lo, active)
        ghi = G(hi, active)
    else:
        raise BracketError("root not bracketed; check the declared monotonicity constant")
    if np.any((glo > 0) | (ghi < 0)) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise BracketError("root not bracketed; check the declared monotonicity constant")

    ya = np.where(ga < 0, lo, hi)
    gy = np.where(ga < 0, glo, ghi)
    for _ in range(max_iter):
        h = 1e-7 * (1.0 + np.abs(ya))
        slope = (G(ya + h, active) - gy) / h
        newton = ya - gy / np.where(slope > 0, slope, 1.0)
        inside = (slope > 0) & (newton > lo) & (newton < hi)
        cand = np.where(inside, newton, 0.5 * (lo + hi))
        gc = G(cand, active)
        lo = np.where(gc <= 0, cand, lo)
        glo = np.where(gc <= 0, gc, glo)
        hi = np.where(gc >= 0, cand, hi)
        ghi = np.where(gc >= 0, gc, ghi)
        ya, gy = cand, gc
        done = (np.abs(gy) <= tol) | (hi - lo <= 4 * EPS * np.maximum(np.abs(lo), np.abs(hi)))
        if done.all():
            break
        # keep the best endpoint for the unfinished entries
    best_lo = np.abs(glo) < np.abs(gy)
    ya = np.where(best_lo, lo, ya)
    gy = np.where(best_lo, glo, gy)
    best_hi = np.abs(ghi) < np.abs(gy)
    ya = np.where(best_hi, hi, ya)
    gy = np.where(best_hi, ghi, gy)
    y[active] = ya
    resid[active] = np.abs(gy)
    return (y, resid) if return_residual else y


# --------------------------------------------------------------------------
# backward sweep
# --------------------------------------------------------------------------


class PenalizedDriver:
    """``f(t, x, y, z) + n * (y - h(t, x))^-``."""

    def __init__(self, driver, obstacle, n):
        self.driver, self.obstacle, self.n = driver, obstacle, float(n)
        self.mu = driver.mu

    def penalty(self, t, x, y):
        return self.n * np.maximum(self.obstacle(t, x) - y, 0.0)

    def __call__(self, t, x, y, z):
        return self.driver(t, x, y, z) + self.penalty(t, x, y)


class _FrozenZ:
    def __init__(self, driver, z):
        self.driver, self.z, self.mu = driver, z, driver.mu

    def __call__(self, t, x, y, z):
        return self.driver(t, x, y, self.z)


def backward_sweep(problem, bundle, basis=None, opts=None, mode="plain", obstacle=None,
                   n_penalty=0.0, frozen_z=None):
    """Shared backward recursion for the BSDE and reflected-BSDE schemes.

    ``mode`` is ``"plain"``, ``"reflected"`` (projection ``max(y, h)``) or
    ``"penalized"`` (driver ``f + n (y-h)^-`` solved implicitly).
    """
    opts = opts or SolverOptions()
    basis = basis or BasisSpec.default(bundle.d)
    grid = bundle.grid
    grid.check_implicit(problem.driver.mu)
    J, M, N, d = bundle.J, bundle.M, bundle.N, bundle.d
    knots, steps = grid.knots, grid.steps
    if mode != "plain" and obstacle is None:
        raise ValueError(f"mode {mode!r} needs an obstacle")

    Y = np.empty((J, M, N + 1))
    Z = np.zeros((J, M, N, d))
    K = np.zeros((J, M, N + 1))
    se = np.zeros((J, N + 1))
    coefficients = [[None] * N for _ in range(J)]
    rank_deficient = []
    max_resid = 0.0

    base = problem.driver
    if mode == "penalized" and n_penalty > 0:
        step_driver = PenalizedDriver(base, obstacle, n_penalty)
    else:
        step_driver = base

    theta = float(opts.theta)
    if not 0.5 <= theta <= 1.0:
        raise ValueError("theta must lie in [1/2, 1]")
    if mode != "plain" and theta != 1.0:
        raise ValueError("reflected and penalized schemes are fully implicit (theta = 1)")
    for j in range(J):
        xN = bundle.X[j, :, N]
        Y[j, :, N] = problem.terminal(xN)
        if not np.all(np.isfinite(Y[j, :, N])):
            raise SolverError(f"non-finite terminal value at j={j}")
        realized = Y[j, :, N].copy()
        se[j, N] = realized.std() / math.sqrt(M)
        f_next = None
        for i in range(N - 1, -1, -1):
            t, dt = knots[i], steps[i]
            xi = bundle.X[j, :, i]
            dB = bundle.dB[j, :, i]
            y_next = Y[j, :, i + 1]
            try:
                z_hat, z_coef, z_def, z_loo = regress(
                    xi, (y_next - y_next.mean())[:, None] * dB / dt, basis, leave_one_out=True
                )
                z_hat = z_hat.reshape(M, d)
                target = y_next.copy()
                if f_next is not None:
                    target += (1.0 - theta) * dt * f_next
                if opts.control_variate:
                    target -= np.einsum("pk,pk->p", z_loo.reshape(M, d), dB)
                e, y_coef, y_def = regress(xi, target, basis)
            except (ValueError, np.linalg.LinAlgError) as exc:
                raise SolverError(f"regression failed at (j={j}, i={i}): {exc}") from exc
            if z_def or y_def:
                rank_deficient.append((j, i))
            coefficients[j][i] = (y_coef, z_coef)

            driver = step_driver if frozen_z is None else _FrozenZ(step_driver, frozen_z[j, :, i])
            # the first step from the terminal condition is always backward Euler
            w = theta if f_next is not None else 1.0
            try:
                y, resid = implicit_driver_step(e, t, xi, z_hat, w * dt, driver, tol=opts.tol,
                                                max_iter=opts.max_iter, mu=base.mu, return_residual=True)
            except BracketError as exc:
                raise SolverError(f"implicit step failed at (j={j}, i={i}): {exc}") from exc
            max_resid = max(max_resid, float(resid.max()))
            if mode == "reflected":
                yr = np.maximum(y, obstacle(t, xi))
                dK = yr - y
                y = yr
            elif mode == "penalized" and n_penalty > 0:
                dK = step_driver.penalty(t, xi, y) * dt
            else:
                dK = None
            if not np.all(np.isfinite(y)):
                m = int(np.argwhere(~np.isfinite(y))[0][0])
                raise SolverError(f"non-finite Y at (j={j}, m={m}, i={i})")
            if theta < 1.0:
                z_drv = z_hat if frozen_z is None else frozen_z[j, :, i]
                f_next = base(t, xi, y, z_drv)
            Y[j, :, i] = y
            Z[j, :, i] = z_hat
            if dK is not None:
                K[j, :, i] = dK  # increments for now, cumulated below
            realized = realized + (target - y_next) + (y - e)
            se[j, i] = realized.std() / math.sqrt(M)
        # cumulative K[i] = sum_{k<i} dK_k
        inc = K[j, :, :N].copy()
        K[j, :, 0] = 0.0
        np.cumsum(inc, axis=1, out=K[j, :, 1:])

    meta = {
        "mode": mode,
        "n_penalty": float(n_penalty),
        "rank_deficient_steps": rank_deficient,
        "max_residual": max_resid,
        "tol": opts.tol,
        "basis": basis,
        "control_variate": opts.control_variate,
        "theta": opts.theta,
    }
    return BackwardSolution(Y=Y, Z=Z, K=K, se=se, coefficients=coefficients, meta=meta)


def solve_bsde(problem, bundle, basis=None, opts=None):
    """Regression Monte Carlo solution of the (non-reflected) BSDE.

    ``solution.u[j]`` estimates ``u(t_0, x_j)`` and ``solution.z0[j]``
    estimates ``sigma^T grad u(t_0, x_j)``.
    """
    return backward_sweep(problem, bundle, basis, opts, mode="plain")


# --------------------------------------------------------------------------
# Picard iteration on the z-argument
# --------------------------------------------------------------------------


@dataclass
class PicardReport:
    norms: list
    gamma: float
    alpha: float
    target: float

    @property
    def ratios(self):
        n = self.norms
        return [n[i] / n[i - 1] if n[i - 1] > 0 else 0.0 for i in range(1, len(n))]

    @property
    def iterations(self):
        return len(self.norms)


def gamma_norm(dY, dZ, bundle, weight, gamma):
    """Discrete ``||.||_gamma``: sum_j sum_i e^{gamma t_i} (|dY|^2 + |dZ|^2) rho(x_j) dt_i."""
    knots, steps = bundle.grid.knots, bundle.grid.steps
    N = bundle.N
    sq = (dY[:, :, :N] ** 2).mean(axis=1) + (dZ ** 2).sum(axis=-1).mean(axis=1)
    # log-sum-exp so that large gamma * T does not overflow the weights
    logw = np.log(weight(bundle.points))[:, None] + (gamma * knots[:N] + np.log(steps))[None, :]
    top = float(logw.max())
    total = float(np.sum(np.exp(logw - top) * sq))
    if total == 0.0:
        return 0.0
    log_norm = 0.5 * (top + math.log(total))
    return math.exp(log_norm) if log_norm < 709.0 else math.inf


def picard_solve(problem, bundle, basis=None, v0=None, max_iter=20, tol=1e-10, k1=1.0, k2=1.0, opts=None):
    """Fixed-point iteration ``u_n = Psi(u_{n-1})`` on the z-argument of the driver.

    Each application of ``Psi`` solves the BSDE whose driver has ``z``
    frozen at the previous iterate's ``Z``. ``report.norms[n]`` is the
    gamma-norm distance between iterates ``n+2`` and ``n+1``.
    """
    k = problem.driver.k
    alpha = k2 / (2.0 * k1)
    gamma = 1.0 + 2.0 * k1 ** 2 * k ** 2 / k2 ** 2
    report = PicardReport(norms=[], gamma=gamma, alpha=alpha, target=1.0 / math.sqrt(2.0))
    z = np.zeros((bundle.J, bundle.M, bundle.N, bundle.d)) if v0 is None else np.asarray(v0, dtype=float)
    sol = backward_sweep(problem, bundle, basis, opts, frozen_z=z)
    rising = 0
    for _ in range(max_iter):
        new = backward_sweep(problem, bundle, basis, opts, frozen_z=sol.Z)
        dist = gamma_norm(new.Y - sol.Y, new.Z - sol.Z, bundle, problem.weight, gamma)
        if not math.isfinite(dist):
            raise SolverError(f"gamma-weighted distance is not finite after {report.iterations} iterations")
        if report.norms and dist >= report.norms[-1]:
            rising += 1
        else:
            rising = 0
        report.norms.append(dist)
        sol = new
        if dist < tol:
            break
        if rising >= 3:
            raise NoContractionError("no contraction: iterate distance grew 3 times in a row", report)
    sol.meta["picard_iterations"] = report.iterations
    return sol, report
