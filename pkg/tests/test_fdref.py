import csv
import json
import math

import numpy as np
import pytest

from monobsde.fdref import FdError, FdGrid, feynman_kac_compare, solve_obstacle_fd, solve_pde_fd
from monobsde.model import WeightSpec
from monobsde.oracles import black_scholes_call, crr_american_put, cubic_driver_solution, heat_gaussian

from conftest import make_problem

PUT = {"r": 0.06, "s": 0.4, "K": 100.0}
PUT_GRID = FdGrid(0.0, 100.0 * math.exp(6 * 0.4 * math.sqrt(0.5)), 400, 400)


def put_problem():
    return make_problem(drift="r*x", diffusion="s*x", terminal="max(K - x, 0)", driver="-r*y",
                        obstacle="max(K - x, 0)", horizon=0.5, params=PUT, mu=-0.06)


@pytest.fixture(scope="module")
def put_sor():
    spec = put_problem()
    return spec, solve_obstacle_fd(spec, spec.obstacle, PUT_GRID)


def test_grid_validation():
    with pytest.raises(ValueError):
        FdGrid(0.0, 1.0, nx=2)
    with pytest.raises(ValueError):
        FdGrid(1.0, 1.0)
    with pytest.raises(ValueError):
        FdGrid(0.0, 1.0, boundary="periodic")


def test_heat_equation_against_kernel():
    spec = make_problem(diffusion="sqrt(2)", terminal="exp(-x^2/2)")
    fd = solve_pde_fd(spec, FdGrid(-10.0, 10.0, 400, 400), theta=0.5)
    assert np.max(np.abs(fd.u[0] - heat_gaussian(fd.x, 1.0))) < 1e-3


def test_heat_refinement_order():
    spec = make_problem(diffusion="sqrt(2)", terminal="exp(-x^2/2)")
    errs = []
    for nx in (41, 81, 161):
        fd = solve_pde_fd(spec, FdGrid(-10.0, 10.0, nx, 800), theta=0.5, rannacher=0)
        errs.append(np.max(np.abs(fd.u[0] - heat_gaussian(fd.x, 1.0))))
    assert errs[0] / errs[1] > 2.0 and errs[1] / errs[2] > 2.0


def test_cubic_every_node():
    spec = make_problem(diffusion="0", terminal="1", driver="-y^3")
    fd = solve_pde_fd(spec, FdGrid(-1.0, 1.0, 11, 1000), theta=0.5, rannacher=0)
    exact = cubic_driver_solution(1.0, 1.0 - fd.t)[:, None]
    assert np.max(np.abs(fd.u - exact)) < 1e-6


def test_black_scholes_call():
    spec = make_problem(drift="r*x", diffusion="s*x", terminal="max(x - K, 0)", driver="-r*y",
                        params={"r": 0.05, "s": 0.2, "K": 100.0}, mu=-0.05)
    fd = solve_pde_fd(spec, FdGrid(0.0, 100.0 * math.exp(1.2), 400, 400), theta=0.5)
    price, z = black_scholes_call(100.0, 100.0, 0.05, 0.2, 1.0)
    assert fd.at(100.0) == pytest.approx(price, rel=1e-3)
    assert fd.du_at(100.0) == pytest.approx(z, rel=1e-2)


def test_clamped_gradient_boundary():
    spec = make_problem(drift="r*x", diffusion="s*x", terminal="max(x - K, 0)", driver="-r*y",
                        params={"r": 0.05, "s": 0.2, "K": 100.0}, mu=-0.05)
    fd = solve_pde_fd(spec, FdGrid(0.0, 100.0 * math.exp(1.2), 400, 400, "clamped-gradient"), theta=0.5)
    price, _ = black_scholes_call(100.0, 100.0, 0.05, 0.2, 1.0)
    assert fd.at(100.0) == pytest.approx(price, rel=1e-3)


def test_discrete_comparison_is_exact():
    lo = make_problem(drift="0.1*x", diffusion="0.5", terminal="tanh(x)", driver="-y^3 - 0.1")
    hi = make_problem(drift="0.1*x", diffusion="0.5", terminal="tanh(x) + 0.01*exp(-x^2)", driver="-y^3")
    grid = FdGrid(-4.0, 4.0, 200, 200)
    a, b = solve_pde_fd(lo, grid), solve_pde_fd(hi, grid)
    assert np.all(a.u <= b.u)


def test_inactive_obstacle_bit_exact():
    spec = make_problem(drift="0.1*x", diffusion="0.5", terminal="tanh(x)", driver="-y^3")
    low = make_problem(obstacle="-1e9").obstacle
    grid = FdGrid(-4.0, 4.0, 100, 100)
    plain = solve_pde_fd(spec, grid)
    for method, n in (("projected-sor", None), ("penalized", 1e4)):
        obs = solve_obstacle_fd(spec, low, grid, method=method, n_penalty=n)
        assert np.array_equal(obs.u, plain.u)
        assert np.all(obs.multiplier == 0)


def test_american_put_projected(put_sor):
    spec, fd = put_sor
    ref = crr_american_put(100.0, 100.0, 0.06, 0.4, 0.5, 2000)
    assert fd.at(100.0) == pytest.approx(ref, rel=2.5e-3)


def test_obstacle_invariants(put_sor):
    spec, fd = put_sor
    pts = fd.x[:, None]
    h = np.stack([spec.obstacle(t, pts) for t in fd.t])
    assert np.all(fd.u >= h)
    assert np.all(fd.multiplier >= 0)
    plain = solve_pde_fd(spec, PUT_GRID)
    assert np.all(fd.u >= plain.u)
    # multiplier only where u touches h
    gap = fd.u[:-1] - h[:-1]
    assert np.all(fd.multiplier[gap > 1e-9 * (1 + np.abs(h[:-1]))] == 0)
    assert fd.multiplier.sum() > 0


def test_penalty_schedule_monotone_and_close(put_sor):
    spec, sor = put_sor
    sols = [solve_obstacle_fd(spec, spec.obstacle, PUT_GRID, method="penalized", n_penalty=n)
            for n in (1e2, 1e3, 1e4)]
    for a, b in zip(sols, sols[1:]):
        assert np.all(a.u <= b.u)
    assert np.max(np.abs(sols[-1].u - sor.u)) < 1e-3
    assert np.all(sols[-1].multiplier >= 0)


def test_obstacle_method_validation():
    spec = put_problem()
    with pytest.raises(ValueError):
        solve_obstacle_fd(spec, spec.obstacle, PUT_GRID, method="penalized")
    with pytest.raises(ValueError):
        solve_obstacle_fd(spec, spec.obstacle, PUT_GRID, method="lcp")
    bad = make_problem(terminal="0", obstacle="1")
    with pytest.raises(ValueError):
        solve_obstacle_fd(bad, bad.obstacle, FdGrid(-1.0, 1.0, 10, 10))


def test_fd_rejects_bad_inputs():
    spec = make_problem(terminal="1", driver="3*y", mu=3.0)
    with pytest.raises(ValueError):
        solve_pde_fd(spec, FdGrid(-1.0, 1.0, 10, 2))
    with pytest.raises(ValueError):
        solve_pde_fd(make_problem(), FdGrid(-1.0, 1.0, 10, 10), theta=0.3)


def test_nonlinear_failure_names_time():
    from monobsde.model import DriverSpec

    spec = make_problem(terminal="1")
    spec = spec.replace(driver=DriverSpec(lambda t, x, y, z: 50.0 * y, mu=0.0))
    with pytest.raises(FdError, match="t="):
        solve_pde_fd(spec, FdGrid(-1.0, 1.0, 10, 10))


def test_csv_and_sidecar(tmp_path):
    spec = make_problem(diffusion="1", terminal="exp(-x^2)")
    fd = solve_pde_fd(spec, FdGrid(-3.0, 3.0, 7, 4))
    path = tmp_path / "fd.csv"
    fd.to_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["t", "x", "u", "du", "multiplier_mass"]
    assert len(rows) == 1 + 5 * 7
    assert float(rows[1][2]) == fd.u[0, 0]
    meta = json.load(open(str(path) + ".json"))
    assert meta["nx"] == 7 and meta["nt"] == 4 and meta["theta"] == 1.0


def test_compare_identity_and_region():
    spec = make_problem(diffusion="1", terminal="exp(-x^2)")
    fd = solve_pde_fd(spec, FdGrid(-3.0, 3.0, 61, 20))

    class Fake:
        def __init__(self, u, z):
            self.u, self.z0, self.u_se = u, z[:, None], np.full(u.shape, 0.01)

    pts = np.array([-1.0, 0.0, 1.0])
    rep = feynman_kac_compare(fd, Fake(fd.at(pts), fd.du_at(pts)), pts, WeightSpec())
    assert rep.u_distance == 0 and rep.z_distance == 0 and rep.fraction_within() == 1.0
    with pytest.raises(ValueError):
        feynman_kac_compare(fd, Fake(fd.at(pts), fd.du_at(pts)), pts, WeightSpec(), region=(-5.0, 5.0))
