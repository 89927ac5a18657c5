"""Reflected BSDEs: projection and penalization schemes, the Skorokhod
residual, reconstruction of the reflecting measure, and the a-priori report.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .bsde import backward_sweep


class ObstacleCompatibilityError(ValueError):
    pass


def _check_compatible(problem, obstacle, bundle, tol=1e-12):
    xN = bundle.X[:, :, -1].reshape(-1, bundle.d)
    gap = obstacle(bundle.grid.T, xN) - problem.terminal(xN)
    if np.any(gap > tol * (1.0 + np.abs(gap))):
        raise ObstacleCompatibilityError(f"obstacle exceeds terminal value by {gap.max():.3g} at T")


def solve_rbsde_reflected(problem, obstacle, bundle, basis=None, opts=None):
    """Discrete Snell-envelope scheme: ``Y_i = max(y_i, h(t_i, X_i))``.

    ``K`` accumulates the pushes ``Y_i - y_i``.
    """
    _check_compatible(problem, obstacle, bundle)
    return backward_sweep(problem, bundle, basis, opts, mode="reflected", obstacle=obstacle)


def solve_rbsde_penalized(problem, obstacle, n_penalty, bundle, basis=None, opts=None):
    """Penalized scheme with driver ``f + n (y - h)^-`` solved implicitly in ``y``.

    ``K`` accumulates ``n (Y_i - h_i)^- dt_i``.
    """
    if n_penalty < 0:
        raise ValueError("penalty must be nonnegative")
    _check_compatible(problem, obstacle, bundle)
    return backward_sweep(problem, bundle, basis, opts, mode="penalized", obstacle=obstacle,
                          n_penalty=n_penalty)


def _increments(solution):
    return np.diff(solution.K, axis=2)


def skorokhod_residual(solution, obstacle, bundle):
    """Mean over paths of ``sum_i |Y_i - h(t_i, X_i)| dK_i``, one value per point.

    Zero for the projection scheme by construction; for the penalized
    scheme it is ``n * sum ((Y - h)^-)^2 dt`` and vanishes as ``n`` grows.
    """
    N = bundle.N
    dK = _increments(solution)
    out = np.zeros(bundle.J)
    for j in range(bundle.J):
        h = np.stack([obstacle(t, bundle.X[j, :, i]) for i, t in enumerate(bundle.grid.knots[:N])], axis=1)
        out[j] = np.mean(np.sum(np.abs(solution.Y[j, :, :N] - h) * dK[j], axis=1))
    return out


# --------------------------------------------------------------------------
# reflecting measure
# --------------------------------------------------------------------------


@dataclass
class MeasureEstimate:
    """Space-time histogram of the reflecting measure.

    ``mass[i, b]`` is the weighted mass deposited at time knot ``i`` in
    spatial bin ``b``; ``overflow[i]`` collects paths outside the bins.
    """

    edges: np.ndarray
    mass: np.ndarray
    overflow: np.ndarray
    contact: np.ndarray
    weighted_total: float

    @property
    def centers(self):
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    def contact_fraction(self):
        """Share of the total mass lying in contact-flagged cells."""
        total = self.mass.sum() + self.overflow.sum()
        if total == 0:
            return 1.0
        return float(self.mass[self.contact].sum() / total)

    def to_csv(self, path):
        """Columns: ``t_index, bin_index, x_center, mass, contact_flag``.

        Overflow cells are written with ``bin_index = -1`` and an empty centre.
        """
        centers = self.centers
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_index", "bin_index", "x_center", "mass", "contact_flag"])
            for i in range(self.mass.shape[0]):
                for b in range(self.mass.shape[1]):
                    w.writerow([i, b, repr(float(centers[b])), repr(float(self.mass[i, b])), int(self.contact[i, b])])
                if self.overflow[i] != 0:
                    w.writerow([i, -1, "", repr(float(self.overflow[i])), 0])


def default_binning(bundle, n_bins=256):
    x = bundle.X[..., 0]
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def estimate_measure(solution, bundle, obstacle, weight, edges=None, contact_tol=1e-3):
    """Deposit every ``dK_i`` into the cell of ``(t_i, X_i)``.

    Cell masses are averaged over paths per initial point and summed over
    points with weights ``rho(x_j)``, so the total equals
    ``sum_j rho(x_j) mean_m K[j, m, N]``. A cell is flagged as contact when
    the mean of ``Y - h`` over the nodes it contains is below
    ``contact_tol * (1 + mean |h|)``. One spatial dimension only.
    """
    if bundle.d != 1:
        raise ValueError("measure binning is implemented for d = 1")
    edges = default_binning(bundle) if edges is None else np.asarray(edges, dtype=float)
    nb = edges.size - 1
    J, M, N = bundle.J, bundle.M, bundle.N
    dK = _increments(solution)
    rho = weight(bundle.points)
    mass = np.zeros((N, nb))
    overflow = np.zeros(N)
    gap_sum = np.zeros((N, nb))
    h_sum = np.zeros((N, nb))
    count = np.zeros((N, nb))
    for j in range(J):
        for i in range(N):
            x = bundle.X[j, :, i, 0]
            b = np.searchsorted(edges, x, side="right") - 1
            b[x == edges[-1]] = nb - 1
            inside = (b >= 0) & (b < nb)
            bi = b[inside]
            dk = dK[j, :, i]
            mass[i] += rho[j] * np.bincount(bi, weights=dk[inside], minlength=nb) / M
            overflow[i] += rho[j] * dk[~inside].sum() / M
            h = obstacle(bundle.grid.knots[i], bundle.X[j, :, i])
            gap_sum[i] += np.bincount(bi, weights=(solution.Y[j, :, i] - h)[inside], minlength=nb)
            h_sum[i] += np.bincount(bi, weights=np.abs(h[inside]), minlength=nb)
            count[i] += np.bincount(bi, minlength=nb)
    occupied = count > 0
    mean_gap = np.where(occupied, gap_sum / np.maximum(count, 1), np.inf)
    mean_h = np.where(occupied, h_sum / np.maximum(count, 1), 0.0)
    contact = occupied & (mean_gap < contact_tol * (1.0 + mean_h))
    total = float(mass.sum() + overflow.sum())
    return MeasureEstimate(edges=edges, mass=mass, overflow=overflow, contact=contact, weighted_total=total)


def weighted_terminal_K(solution, bundle, weight):
    """``sum_j rho(x_j) * mean_m K[j, m, N]``."""
    return float(np.sum(weight(bundle.points) * solution.K[:, :, -1].mean(axis=1)))


# --------------------------------------------------------------------------
# a-priori estimate
# --------------------------------------------------------------------------


@dataclass
class AprioriReport:
    left: float
    sup_y2: float
    z_energy: float
    k_terminal2: float
    xi2: float
    f0_energy: float
    phi_sup_l2: float
    sup_l2: float
    constant_term: float

    @property
    def right(self):
        return self.xi2 + self.f0_energy + self.phi_sup_l2 + self.sup_l2 + self.constant_term

    @property
    def ratio(self):
        return self.left / self.right if self.right > 0 else math.inf


def apriori_report(solution, problem, bundle, obstacle=None):
    """Monte Carlo estimates of both sides of the a-priori bound.

    Left: ``E[sup |Y|^2] + E[sum |Z|^2 dt] + E[K_N^2]``. Right ingredients:
    ``E[xi^2]``, ``E[int f(t, X, 0, 0)^2 dt]``, ``E[phi(sup L^+)^2]``,
    ``E[(sup L^+)^2]`` and ``1 + phi(2T)^2``. Expectations are averaged
    over the initial points.
    """
    grid = bundle.grid
    N, d = bundle.N, bundle.d
    steps = grid.steps
    drv = problem.driver
    if drv.kappa1 is not None and drv.beta1 is not None:
        phi = drv.phi
    else:
        phi = lambda r: np.zeros_like(np.asarray(r, dtype=float))  # noqa: E731
    sup_y2 = float(np.mean(np.max(solution.Y ** 2, axis=2)))
    z_energy = float(np.mean(np.sum((solution.Z ** 2).sum(axis=-1) * steps, axis=2)))
    k2 = float(np.mean(solution.K[:, :, -1] ** 2))
    xi2 = float(np.mean(solution.Y[:, :, -1] ** 2))
    f0 = 0.0
    sup_l = np.zeros((bundle.J, bundle.M))
    for j in range(bundle.J):
        acc = np.zeros(bundle.M)
        for i in range(N):
            x = bundle.X[j, :, i]
            base = drv(grid.knots[i], x, np.zeros(bundle.M), np.zeros((bundle.M, d)))
            acc += base ** 2 * steps[i]
        f0 += acc.mean() / bundle.J
        if obstacle is not None:
            lvals = np.stack([obstacle(t, bundle.X[j, :, i]) for i, t in enumerate(grid.knots)], axis=1)
            sup_l[j] = np.maximum(lvals, 0.0).max(axis=1)
    phi_sup = float(np.mean(phi(sup_l) ** 2)) if obstacle is not None else 0.0
    sup_l2 = float(np.mean(sup_l ** 2))
    const = 1.0 + float(np.asarray(phi(2.0 * grid.T)) ** 2)
    return AprioriReport(
        left=sup_y2 + z_energy + k2,
        sup_y2=sup_y2,
        z_energy=z_energy,
        k_terminal2=k2,
        xi2=xi2,
        f0_energy=float(f0),
        phi_sup_l2=phi_sup,
        sup_l2=sup_l2,
        constant_term=const,
    )
