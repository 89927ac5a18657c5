import math

import numpy as np
import pytest

from monobsde import oracles
from monobsde.model import WeightSpec, diffusion_from_expressions
from monobsde.norms import (
    FlowSampling,
    NormSampling,
    equivalence_ratio,
    flow_ratio_estimate,
    trapezoid_weights,
    weighted_h_norm,
)
from monobsde.sde import TimeGrid

GRID = TimeGrid.uniform(1.0, 20)
W3 = WeightSpec(p=3.0)


def indicator(t, x):
    return np.where(np.abs(x[:, 0]) <= 1.0, 1.0, 0.0)


def brownian_oracle(grid, sampling, weight, plain):
    x = np.linspace(sampling.x_lo, sampling.x_hi, sampling.n_points)
    wx, wt = trapezoid_weights(x), trapezoid_weights(grid.knots)
    rho = weight(x[:, None])
    comp = sum(wt[i] * np.sum(wx * rho * oracles.brownian_indicator_mean(x, t)) for i, t in enumerate(grid.knots))
    return comp / plain


def test_trapezoid_weights_sum_to_length():
    w = trapezoid_weights([0.0, 0.5, 2.0])
    assert np.allclose(w, [0.25, 1.0, 0.75])


def test_h_norm_zero_field():
    x, t = np.linspace(-1, 1, 11), np.linspace(0, 1, 5)
    z = np.zeros((t.size, x.size))
    assert weighted_h_norm(z, z, WeightSpec(), x, t) == 0.0


def test_h_norm_constant_field_against_closed_form():
    # int_{-1}^{1} (1+|x|)^-2 dx = 1 for u = 1, du = 0, T = 1
    x, t = np.linspace(-1, 1, 20001), np.linspace(0, 1, 3)
    u = np.ones((t.size, x.size))
    assert weighted_h_norm(u, 0 * u, WeightSpec(), x, t) == pytest.approx(1.0, abs=1e-6)


def test_h_norm_quadratic_scaling_and_monotone(rng):
    x, t = np.linspace(-2, 2, 41), np.linspace(0, 1, 6)
    u, du = rng.normal(size=(6, 41)), rng.normal(size=(6, 41))
    base = weighted_h_norm(u, du, WeightSpec(), x, t)
    assert weighted_h_norm(2 * u, 2 * du, WeightSpec(), x, t) == pytest.approx(4 * base, rel=1e-14)
    shrink = rng.uniform(0, 1, size=u.shape)
    assert weighted_h_norm(u * shrink, du * shrink, WeightSpec(), x, t) <= base


def test_frozen_flow_ratio_is_one_without_variance():
    frozen = diffusion_from_expressions("0", "0")
    rep = equivalence_ratio(frozen, W3, indicator, GRID, NormSampling(M=50), name="ind")
    assert rep.composed == pytest.approx(rep.plain, rel=1e-14)
    assert rep.ratio == pytest.approx(1.0, abs=1e-6)
    assert rep.std_error == 0.0 and rep.test_function == "ind"


def test_brownian_ratio_within_three_se_of_quadrature():
    s = NormSampling(-6.0, 6.0, 121, M=2000, seed=1)
    rep = equivalence_ratio(diffusion_from_expressions("0", "1"), W3, indicator, GRID, s)
    expected = brownian_oracle(GRID, s, W3, rep.plain)
    assert abs(rep.ratio - expected) <= 3 * rep.std_error
    assert rep.std_error > 0


def test_ou_ratio_bounded_and_stable_across_seeds():
    ou = diffusion_from_expressions("-x", "1")
    ratios = [equivalence_ratio(ou, W3, indicator, GRID, NormSampling(M=500, seed=s)).ratio for s in (1, 2, 3)]
    assert all(0.1 <= r <= 10 for r in ratios)
    assert max(ratios) / min(ratios) < 1.1


def test_ratio_invariant_under_positive_scaling():
    diff = diffusion_from_expressions("0", "1")
    s = NormSampling(M=200, seed=4)
    a = equivalence_ratio(diff, W3, indicator, GRID, s)
    b = equivalence_ratio(diff, W3, lambda t, x: 7.5 * indicator(t, x), GRID, s)
    assert b.ratio == pytest.approx(a.ratio, rel=1e-13)


def test_degenerate_test_function():
    with pytest.raises(ValueError, match="degenerate test function"):
        equivalence_ratio(diffusion_from_expressions("0", "1"), W3, lambda t, x: 0.0 * x[:, 0], GRID, NormSampling())


def test_norms_reject_higher_dimensions():
    diff = diffusion_from_expressions("0", "1", dimension=2)
    with pytest.raises(ValueError):
        equivalence_ratio(diff, W3, indicator, GRID, NormSampling())
    with pytest.raises(ValueError):
        flow_ratio_estimate(diff, W3, GRID, FlowSampling())


def test_flow_ratio_identity():
    diag = flow_ratio_estimate(diffusion_from_expressions("0", "0"), W3, GRID, FlowSampling(n_source=16000, M=1))
    assert not diag.empty.any()
    assert np.allclose(diag.estimates, 1.0, atol=1e-3)


def test_flow_ratio_affine_change_of_variables():
    weight = WeightSpec()
    diag = flow_ratio_estimate(diffusion_from_expressions("0.5*x", "0"), weight, TimeGrid.uniform(1.0, 100),
                               FlowSampling(n_source=16000, M=1))
    # deterministic flow x -> x e^{0.5}: pushforward density rho(y e^{-0.5}) e^{-0.5}
    from scipy import integrate

    rho = lambda y: (1 + abs(y)) ** -2.0
    for a, b, est in zip(diag.edges[:-1], diag.edges[1:], diag.estimates):
        num = integrate.quad(lambda y: rho(y * math.exp(-0.5)) * math.exp(-0.5), a, b)[0]
        den = integrate.quad(rho, a, b)[0]
        assert est == pytest.approx(num / den, rel=0.02)


def test_flow_ratio_brownian_bounds():
    diag = flow_ratio_estimate(diffusion_from_expressions("0", "1"), WeightSpec(), GRID, FlowSampling(seed=2))
    assert 0.2 <= diag.c1 <= diag.c2 <= 5.0
