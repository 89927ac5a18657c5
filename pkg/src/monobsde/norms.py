"""Weighted norms and empirical diagnostics of the forward flow.

The flow-composed norm and the pushforward-density ratio are Monte Carlo
surrogates for the two-sided constants relating analytic and probabilistic
norms; they are reported, never asserted against fixed values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .sde import simulate_bundle


def trapezoid_weights(nodes):
    nodes = np.asarray(nodes, dtype=float)
    w = np.zeros_like(nodes)
    h = np.diff(nodes)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


def weighted_h_norm(u, du, weight, x, t):
    """Trapezoidal ``int int (|u|^2 + |sigma^T grad u|^2) rho dx ds``.

    ``u`` and ``du`` have shape ``(len(t), len(x))``. The squared norm is
    returned, so scaling the fields by ``c`` scales the result by ``c^2``.
    """
    u = np.asarray(u, dtype=float)
    du = np.asarray(du, dtype=float)
    x = np.asarray(x, dtype=float)
    rho = weight(x[:, None])
    integrand = (u ** 2 + du ** 2) * rho[None, :]
    wt = trapezoid_weights(t)
    wx = trapezoid_weights(x)
    return float(wt @ integrand @ wx)


@dataclass
class NormSampling:
    """Quadrature box and Monte Carlo size for :func:`equivalence_ratio`."""

    x_lo: float = -4.0
    x_hi: float = 4.0
    n_points: int = 81
    M: int = 2000
    seed: int = 0
    workers: int = 1


@dataclass
class NormReport:
    plain: float
    composed: float
    ratio: float
    std_error: float
    test_function: str = ""


def equivalence_ratio(diffusion, weight, psi, grid, sampling, name=""):
    """Compare ``int int E|psi(s, X_s^{t,x})| rho(x)`` with ``int int |psi(s, x)| rho(x)``.

    Both integrals use the same trapezoidal rule over ``grid`` (time) and the
    sampling box (space). ``psi(t, x)`` takes ``x`` of shape ``(P, 1)``.
    """
    if diffusion.dimension != 1:
        raise ValueError("equivalence_ratio quadrature is one-dimensional")
    x = np.linspace(sampling.x_lo, sampling.x_hi, sampling.n_points)
    wx = trapezoid_weights(x)
    wt = trapezoid_weights(grid.knots)
    rho = weight(x[:, None])
    plain_vals = np.stack([np.abs(psi(t, x[:, None])) for t in grid.knots])
    plain = float(wt @ plain_vals @ (wx * rho))
    if plain <= 0:
        raise ValueError("degenerate test function: zero plain norm")

    bundle = simulate_bundle(diffusion, grid, x[:, None], sampling.M, sampling.seed, workers=sampling.workers)
    # per-path functional F[j, m] = sum_i wt_i |psi(t_i, X_i)|
    F = np.zeros((x.size, sampling.M))
    for i, t in enumerate(grid.knots):
        vals = np.abs(psi(t, bundle.X[:, :, i].reshape(-1, 1))).reshape(x.size, sampling.M)
        F += wt[i] * vals
    coeff = wx * rho
    composed = float(coeff @ F.mean(axis=1))
    var = float(np.sum(coeff ** 2 * F.var(axis=1, ddof=1) / sampling.M)) if sampling.M > 1 else 0.0
    return NormReport(plain=plain, composed=composed, ratio=composed / plain,
                      std_error=math.sqrt(var) / plain, test_function=name)


@dataclass
class FlowSampling:
    """Source grid and reporting bins for :func:`flow_ratio_estimate`.

    Source points are midpoints of ``n_source`` equal cells on
    ``[source_lo, source_hi]``; reporting bins split ``[report_lo, report_hi]``.
    """

    source_lo: float = -8.0
    source_hi: float = 8.0
    n_source: int = 1600
    M: int = 200
    report_lo: float = -2.0
    report_hi: float = 2.0
    n_bins: int = 40
    seed: int = 0


@dataclass
class FlowDiagnostics:
    edges: np.ndarray
    estimates: np.ndarray
    empty: np.ndarray
    c1: float
    c2: float


def flow_ratio_estimate(diffusion, weight, grid, sampling):
    """Binned ratio of the pushforward of ``rho dx`` under ``x -> X_T^{t,x}`` to ``rho dx``.

    For a deterministic flow this is ``rho(inverse(y)) * J(y) / rho(y)``
    averaged over each bin. Empty bins are flagged and left out of the
    reported ``(c1, c2) = (min, max)``.
    """
    if diffusion.dimension != 1:
        raise ValueError("flow_ratio_estimate is one-dimensional")
    s = sampling
    cell = (s.source_hi - s.source_lo) / s.n_source
    x = s.source_lo + cell * (np.arange(s.n_source) + 0.5)
    bundle = simulate_bundle(diffusion, grid, x[:, None], s.M, s.seed)
    XT = bundle.X[:, :, -1, 0]
    mass_per_path = (weight(x[:, None]) * cell / s.M)[:, None] * np.ones_like(XT)
    edges = np.linspace(s.report_lo, s.report_hi, s.n_bins + 1)
    mass, _ = np.histogram(XT.ravel(), bins=edges, weights=mass_per_path.ravel())
    counts, _ = np.histogram(XT.ravel(), bins=edges)
    ref = np.array([
        integrate.quad(lambda r: float(weight(np.array([[r]]))[0]), a, b, points=[0.0] if a < 0 < b else None)[0]
        for a, b in zip(edges[:-1], edges[1:])
    ])
    empty = counts == 0
    est = np.where(empty, np.nan, mass / ref)
    good = est[~empty]
    c1 = float(good.min()) if good.size else math.nan
    c2 = float(good.max()) if good.size else math.nan
    return FlowDiagnostics(edges=edges, estimates=est, empty=empty, c1=c1, c2=c2)
