import csv

import numpy as np
import pytest

from monobsde.bsde import solve_bsde
from monobsde.model import WeightSpec, truncate_obstacle
from monobsde.rbsde import (
    ObstacleCompatibilityError,
    apriori_report,
    estimate_measure,
    skorokhod_residual,
    solve_rbsde_penalized,
    solve_rbsde_reflected,
    weighted_terminal_K,
)
from monobsde.regression import BasisSpec
from monobsde.sde import TimeGrid, simulate_bundle

from conftest import make_problem

PUT = {"r": 0.06, "s": 0.4, "K": 100.0}
LOCAL = BasisSpec("local_polynomial", degree=1, n_bins=8)


@pytest.fixture(scope="module")
def put():
    spec = make_problem(drift="r*x", diffusion="s*x", terminal="max(K - x, 0)", driver="-r*y",
                        obstacle="max(K - x, 0)", horizon=0.5, params=PUT, mu=-0.06, kappa1=0.06, beta1=1.0,
                        weight=WeightSpec("polynomial", p=4.0))
    bundle = simulate_bundle(spec.diffusion, TimeGrid.uniform(0.5, 20), [[90.0], [100.0], [110.0]], 4000, seed=7)
    return spec, bundle


@pytest.fixture(scope="module")
def reflected(put):
    spec, bundle = put
    return solve_rbsde_reflected(spec, spec.obstacle, bundle, LOCAL)


def _h(spec, bundle):
    return np.stack([spec.obstacle(t, bundle.X[:, :, i]) for i, t in enumerate(bundle.grid.knots)], axis=2)


def test_inactive_obstacle_reflected_is_bit_exact(put):
    spec, bundle = put
    low = make_problem(obstacle="-1e9").obstacle
    plain = solve_bsde(spec, bundle, LOCAL)
    refl = solve_rbsde_reflected(spec, low, bundle, LOCAL)
    assert np.array_equal(plain.Y, refl.Y) and np.array_equal(plain.Z, refl.Z)
    assert np.all(refl.K == 0)


def test_inactive_obstacle_penalized(put):
    spec, bundle = put
    low = make_problem(obstacle="-1e9").obstacle
    plain = solve_bsde(spec, bundle, LOCAL)
    pen = solve_rbsde_penalized(spec, low, 1000.0, bundle, LOCAL)
    np.testing.assert_allclose(pen.Y, plain.Y, atol=1e-12, rtol=0)
    assert np.all(pen.K == 0)
    zero = solve_rbsde_penalized(spec, spec.obstacle, 0.0, bundle, LOCAL)
    assert np.array_equal(zero.Y, plain.Y)


def test_constant_barrier_needs_no_push():
    spec = make_problem(terminal="3", obstacle="3")
    bundle = simulate_bundle(spec.diffusion, TimeGrid.uniform(1.0, 10), [[0.0]], 500, seed=1)
    sol = solve_rbsde_reflected(spec, spec.obstacle, bundle)
    np.testing.assert_allclose(sol.Y, 3.0, atol=1e-12)
    assert np.all(sol.K == 0)


def test_reflected_node_invariants(put, reflected):
    spec, bundle = put
    h = _h(spec, bundle)
    Y, K = reflected.Y, reflected.K
    dK = np.diff(K, axis=2)
    assert np.all(Y >= h)
    assert np.all(K[:, :, 0] == 0) and np.all(dK >= 0)
    assert np.all((Y[:, :, :-1] - h[:, :, :-1]) * dK == 0)
    assert np.all(skorokhod_residual(reflected, spec.obstacle, bundle) == 0)


def test_penalized_monotone_and_residual_decreasing(put, reflected):
    spec, bundle = put
    sols = [solve_rbsde_penalized(spec, spec.obstacle, n, bundle, LOCAL) for n in (10, 100, 1000)]
    for a, b in zip(sols, sols[1:]):
        pooled = np.sqrt(a.se ** 2 + b.se ** 2)
        assert np.all(a.mean_Y() <= b.mean_Y() + 3 * pooled)
    res = [skorokhod_residual(s, spec.obstacle, bundle) for s in sols]
    assert np.all(res[0] > res[1]) and np.all(res[1] > res[2]) and np.all(res[2] > 0)
    pooled = np.sqrt(sols[-1].u_se ** 2 + reflected.u_se ** 2)
    assert np.all(np.abs(sols[-1].u - reflected.u) <= 3 * pooled + 0.02)


def test_penalized_increments_follow_formula(put):
    spec, bundle = put
    sol = solve_rbsde_penalized(spec, spec.obstacle, 100.0, bundle, LOCAL)
    h = _h(spec, bundle)
    expected = 100.0 * np.maximum(h - sol.Y, 0.0)[:, :, :-1] * bundle.grid.steps
    np.testing.assert_allclose(np.diff(sol.K, axis=2), expected, atol=1e-12)


def test_obstacle_truncation_above_max_is_bit_exact(put, reflected):
    spec, bundle = put
    capped = truncate_obstacle(spec.obstacle, 1e6)
    again = solve_rbsde_reflected(spec, capped, bundle, LOCAL)
    assert np.array_equal(again.Y, reflected.Y) and np.array_equal(again.K, reflected.K)


def test_incompatible_obstacle():
    spec = make_problem(terminal="0", obstacle="1")
    bundle = simulate_bundle(spec.diffusion, TimeGrid.uniform(1.0, 4), [[0.0]], 10, seed=1)
    with pytest.raises(ObstacleCompatibilityError):
        solve_rbsde_reflected(spec, spec.obstacle, bundle)
    with pytest.raises(ValueError):
        solve_rbsde_penalized(spec, spec.obstacle, -1.0, bundle)


def test_measure_identity_and_contact(put, reflected, tmp_path):
    spec, bundle = put
    meas = estimate_measure(reflected, bundle, spec.obstacle, spec.weight)
    total = weighted_terminal_K(reflected, bundle, spec.weight)
    assert abs(meas.weighted_total - total) <= 1e-10 * max(1.0, total)
    assert np.all(meas.mass >= 0)
    # at this path count cells near the exercise boundary mix in continuation paths
    assert meas.contact_fraction() >= 0.5
    path = tmp_path / "measure.csv"
    meas.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t_index", "bin_index", "x_center", "mass", "contact_flag"]
    assert len(rows) - 1 == meas.mass.size + int(np.count_nonzero(meas.overflow))


def test_measure_overflow_and_zero(put, reflected):
    spec, bundle = put
    narrow = np.linspace(95.0, 105.0, 5)
    meas = estimate_measure(reflected, bundle, spec.obstacle, spec.weight, edges=narrow)
    assert meas.overflow.sum() > 0
    total = weighted_terminal_K(reflected, bundle, spec.weight)
    assert abs(meas.weighted_total - total) <= 1e-10 * max(1.0, total)
    plain = solve_bsde(spec, bundle, LOCAL)
    zero = estimate_measure(plain, bundle, spec.obstacle, spec.weight)
    assert np.all(zero.mass == 0) and zero.weighted_total == 0


def test_penalized_measure_matches_recomputed_cells(put):
    spec, bundle = put
    sol = solve_rbsde_penalized(spec, spec.obstacle, 100.0, bundle, LOCAL)
    meas = estimate_measure(sol, bundle, spec.obstacle, spec.weight)
    h = _h(spec, bundle)
    rho = spec.weight(bundle.points)
    i = 5
    nu = 100.0 * np.maximum(h[:, :, i] - sol.Y[:, :, i], 0.0) * bundle.grid.steps[i]
    hist = sum(rho[j] * np.histogram(bundle.X[j, :, i, 0], bins=meas.edges, weights=nu[j])[0] / bundle.M
               for j in range(bundle.J))
    np.testing.assert_allclose(meas.mass[i], hist, atol=1e-12)


def test_apriori_trivial_cases():
    spec = make_problem(terminal="0", obstacle="-1e9", kappa1=1.0, beta1=1.0)
    bundle = simulate_bundle(spec.diffusion, TimeGrid.uniform(1.0, 5), [[0.0]], 100, seed=1)
    rep = apriori_report(solve_rbsde_reflected(spec, spec.obstacle, bundle), spec, bundle)
    assert rep.left == 0 and rep.xi2 == 0 and rep.f0_energy == 0
    assert rep.constant_term == pytest.approx(1 + (1.0 * (1 + 2.0)) ** 2)
    const = make_problem(diffusion="0", terminal="1")
    b2 = simulate_bundle(const.diffusion, TimeGrid.uniform(1.0, 5), [[0.0]], 10, seed=1)
    rep = apriori_report(solve_bsde(const, b2), const, b2)
    assert rep.left == pytest.approx(1.0) and rep.xi2 == pytest.approx(1.0)


def test_apriori_put_ratio_finite(put, reflected):
    spec, bundle = put
    rep = apriori_report(reflected, spec, bundle, spec.obstacle)
    assert np.isfinite(rep.ratio) and rep.ratio > 0
    for v in (rep.sup_y2, rep.z_energy, rep.k_terminal2, rep.xi2, rep.f0_energy, rep.phi_sup_l2, rep.sup_l2):
        assert v >= 0 and np.isfinite(v)
