"""Built-in scenarios and the translation of config dictionaries into problems.

A scenario is a partial experiment config. ``resolve_config`` deep-merges
defaults, the scenario and user overrides (in that order).
"""

from __future__ import annotations

import copy
import math

from .model import (
    ProbePlan,
    ProblemSpec,
    WeightSpec,
    diffusion_from_expressions,
    driver_from_expression,
    obstacle_from_expression,
    terminal_from_expression,
)
from .regression import BasisSpec

DEFAULTS = {
    "grid": {"N": 50, "M": 10000, "points": [[0.0]], "workers": 1},
    "basis": {"family": "polynomial", "degree": 4, "n_bins": 64},
    "solver_options": {"theta": 1.0, "tol": 1e-12, "max_iter": 100, "control_variate": True},
    "solvers": ["bsde"],
    "penalty_schedule": [10, 100, 1000],
    "fd": {"x_lo": -5.0, "x_hi": 5.0, "nx": 400, "nt": 400, "theta": 1.0, "rannacher": 2,
           "boundary": "dirichlet", "method": "projected-sor"},
    "oracle": None,
    "baseline": None,
    "picard": {"max_iter": 10, "tol": 1e-8, "k1": 1.0, "k2": 1.0},
    "norms": {"psi": "step(1 - abs(x))", "x_lo": -6.0, "x_hi": 6.0, "n_points": 121, "M": 2000,
              "flow_source": [-8.0, 8.0], "flow_n_source": 1600, "flow_M": 200,
              "flow_report": [-2.0, 2.0], "flow_bins": 40},
    "measure": {"n_bins": 256, "contact_tol": 1e-3, "min_contact_fraction": 0.95},
    "tolerances": {"oracle_abs": 0.0, "oracle_rel": 0.0, "fd_abs": 0.0, "fd_rel": 0.0,
                   "z_rel": None, "se_multiple": 3.0, "compare_rel": None},
    "output_dir": "runs",
    "dump_bundle": False,
    "write_fd_csv": False,
}

_PUT = {"r": 0.06, "s": 0.4, "K": 100.0}
_PUT_HI = 100.0 * math.exp(6 * 0.4 * math.sqrt(0.5))

SCENARIOS = {
    "cubic_driver": {
        "description": "f = -y^3, g = 1, no noise; closed form c / sqrt(1 + 2 c^2 (T - t))",
        "problem": {"horizon": 1.0, "drift": "0", "diffusion": "0", "terminal": "1", "driver": "-y^3",
                    "driver_constants": {"mu": 0.0, "k": 0.0, "kappa1": 1.0, "beta1": 3.0},
                    "drift_lipschitz": 0.0, "diffusion_lipschitz": 0.0},
        "grid": {"N": 50, "M": 16, "points": [[0.0]]},
        "solver_options": {"theta": 0.5},
        "solvers": ["bsde", "fd"],
        "fd": {"x_lo": -1.0, "x_hi": 1.0, "nx": 21, "nt": 1000, "theta": 0.5, "rannacher": 0},
        "oracle": {"kind": "cubic", "c": 1.0},
        "tolerances": {"oracle_abs": 1e-3, "fd_abs": 1e-6},
    },
    "linear_driver": {
        "description": "f = -y, g = 1 under geometric Brownian motion; u(0, x) = exp(-T)",
        "problem": {"horizon": 1.0, "drift": "a*x", "diffusion": "s*x", "terminal": "1", "driver": "-y",
                    "params": {"a": 0.05, "s": 0.2},
                    "driver_constants": {"mu": -1.0, "k": 0.0, "kappa1": 1.0, "beta1": 1.0},
                    "drift_lipschitz": 0.05, "diffusion_lipschitz": 0.2},
        "grid": {"N": 50, "M": 100000, "points": [[1.0]]},
        "solvers": ["bsde", "fd"],
        "fd": {"x_lo": 0.0, "x_hi": 4.0, "nx": 400, "nt": 400},
        "oracle": {"kind": "linear", "c": 1.0, "rate": 1.0},
        "tolerances": {"oracle_abs": 1e-2, "fd_abs": 1e-2},
    },
    "bs_european_call": {
        "description": "Black-Scholes call, S0 = 100, K = 100, r = 0.05, vol = 0.2, T = 1",
        "problem": {"horizon": 1.0, "drift": "r*x", "diffusion": "s*x", "terminal": "max(x - K, 0)",
                    "driver": "-r*y", "params": {"r": 0.05, "s": 0.2, "K": 100.0},
                    "driver_constants": {"mu": -0.05, "k": 0.0, "kappa1": 0.05, "beta1": 1.0},
                    "drift_lipschitz": 0.05, "diffusion_lipschitz": 0.2,
                    "weight": {"family": "polynomial", "p": 4.0},
                    "probes": {"x_lo": 0.0, "x_hi": 200.0, "y_lo": 0.0, "y_hi": 100.0, "z_lo": -50, "z_hi": 50}},
        "grid": {"N": 50, "M": 100000, "points": [[100.0]]},
        "solvers": ["bsde", "fd", "compare"],
        "fd": {"x_lo": 0.0, "x_hi": 100.0 * math.exp(1.2), "nx": 400, "nt": 400, "theta": 0.5},
        "oracle": {"kind": "bs_call", "spot": 100.0, "strike": 100.0, "rate": 0.05, "vol": 0.2},
        "tolerances": {"oracle_rel": 5e-3, "fd_rel": 5e-3, "z_rel": 0.05, "compare_rel": 5e-3},
    },
    "american_put": {
        "description": "American put, S0 = 100, K = 100, r = 0.06, vol = 0.4, T = 0.5; reflected and penalized",
        "problem": {"horizon": 0.5, "drift": "r*x", "diffusion": "s*x", "terminal": "max(K - x, 0)",
                    "driver": "-r*y", "obstacle": "max(K - x, 0)", "params": dict(_PUT),
                    "driver_constants": {"mu": -0.06, "k": 0.0, "kappa1": 0.06, "beta1": 1.0},
                    "obstacle_growth": {"kappa": 100.0, "beta": 0.0},
                    "drift_lipschitz": 0.06, "diffusion_lipschitz": 0.4,
                    "weight": {"family": "polynomial", "p": 4.0},
                    "probes": {"x_lo": 0.0, "x_hi": 300.0, "y_lo": 0.0, "y_hi": 100.0, "z_lo": -50, "z_hi": 50}},
        "grid": {"N": 50, "M": 100000, "points": [[100.0]]},
        "basis": {"family": "local_polynomial", "degree": 1, "n_bins": 16},
        "solvers": ["rbsde-reflected", "rbsde-penalized", "fd"],
        "fd": {"x_lo": 0.0, "x_hi": _PUT_HI, "nx": 400, "nt": 400, "theta": 1.0},
        "oracle": {"kind": "crr_put", "spot": 100.0, "strike": 100.0, "rate": 0.06, "vol": 0.4, "steps": 2000},
        "tolerances": {"oracle_rel": 0.01, "fd_rel": 0.01},
    },
    "american_put_constrained": {
        "description": "American put with borrowing rate R = 0.10 > r; premium over the unconstrained price",
        "problem": {"horizon": 0.5, "drift": "r*x", "diffusion": "s*x", "terminal": "max(K - x, 0)",
                    "driver": "-r*y + (R - r)*neg(y - z/s)", "obstacle": "max(K - x, 0)",
                    "params": dict(_PUT, R=0.10),
                    "driver_constants": {"mu": -0.06, "k": 0.1, "kappa1": 0.10, "beta1": 1.0},
                    "obstacle_growth": {"kappa": 100.0, "beta": 0.0},
                    "drift_lipschitz": 0.06, "diffusion_lipschitz": 0.4,
                    "weight": {"family": "polynomial", "p": 4.0},
                    "probes": {"x_lo": 0.0, "x_hi": 300.0, "y_lo": 0.0, "y_hi": 100.0, "z_lo": -50, "z_hi": 50}},
        "grid": {"N": 50, "M": 100000, "points": [[100.0]]},
        "basis": {"family": "local_polynomial", "degree": 1, "n_bins": 16},
        "solvers": ["rbsde-reflected", "fd"],
        "fd": {"x_lo": 0.0, "x_hi": _PUT_HI, "nx": 400, "nt": 400, "theta": 1.0},
        "baseline": {"driver": "-r*y", "driver_constants": {"mu": -0.06, "k": 0.0, "kappa1": 0.06, "beta1": 1.0}},
        "oracle": None,
    },
    "heat_equation": {
        "description": "u_t + u_xx = 0 with Gaussian terminal data; heat-kernel closed form",
        "problem": {"horizon": 1.0, "drift": "0", "diffusion": "sqrt(2)", "terminal": "exp(-x^2/2)",
                    "driver": "0", "driver_constants": {"mu": 0.0, "k": 0.0, "kappa1": 0.0, "beta1": 1.0},
                    "drift_lipschitz": 0.0, "diffusion_lipschitz": 0.0},
        "grid": {"N": 50, "M": 20000, "points": [[-1.0], [0.0], [1.0]]},
        "solvers": ["bsde", "fd", "compare"],
        "fd": {"x_lo": -10.0, "x_hi": 10.0, "nx": 400, "nt": 400, "theta": 0.5},
        "oracle": {"kind": "heat_gaussian", "width": 1.0, "diffusivity": 1.0},
        "tolerances": {"oracle_abs": 5e-3, "fd_abs": 1e-4},
    },
    "norm_diagnostics": {
        "description": "Flow-composed versus plain weighted norms and binned flow ratios under Brownian motion",
        "problem": {"horizon": 1.0, "drift": "0", "diffusion": "1", "terminal": "0", "driver": "0",
                    "driver_constants": {"mu": 0.0, "k": 0.0},
                    "drift_lipschitz": 0.0, "diffusion_lipschitz": 0.0,
                    "weight": {"family": "polynomial", "p": 3.0}},
        "grid": {"N": 50, "M": 2000, "points": [[0.0]]},
        "solvers": ["diagnose-norms"],
        "oracle": {"kind": "brownian_indicator"},
    },
    "picard_lipschitz": {
        "description": "z-dependent Lipschitz driver f = -0.2 y + 0.1 |z|; Picard iteration on z",
        "problem": {"horizon": 1.0, "drift": "0", "diffusion": "1", "terminal": "sin(x)",
                    "driver": "-0.2*y + 0.1*abs(z)",
                    "driver_constants": {"mu": -0.2, "k": 0.1, "kappa1": 0.2, "beta1": 1.0},
                    "drift_lipschitz": 0.0, "diffusion_lipschitz": 0.0},
        "grid": {"N": 50, "M": 20000, "points": [[0.0], [0.5]]},
        "solvers": ["picard"],
        "picard": {"max_iter": 10, "tol": 1e-8},
    },
}


class UnknownScenarioError(KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"unknown scenario {self.name!r}; known scenarios: {', '.join(sorted(SCENARIOS))}"


def list_scenarios():
    """``[(name, description), ...]`` in registry order."""
    return [(name, sc["description"]) for name, sc in SCENARIOS.items()]


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(config):
    """Defaults, then the named scenario (if any), then ``config`` itself."""
    name = config.get("scenario")
    merged = copy.deepcopy(DEFAULTS)
    if name is not None:
        if name not in SCENARIOS:
            raise UnknownScenarioError(name)
        scenario = {k: v for k, v in SCENARIOS[name].items() if k != "description"}
        merged = deep_merge(merged, scenario)
    merged = deep_merge(merged, {k: v for k, v in config.items() if k != "scenario"})
    merged["scenario"] = name
    return merged


def build_problem(problem, name=""):
    """Construct a :class:`ProblemSpec` from the ``problem`` section of a config."""
    d = int(problem.get("dimension", 1))
    params = problem.get("params") or {}
    diffusion = diffusion_from_expressions(
        problem["drift"], problem["diffusion"], dimension=d, params=params,
        drift_lipschitz=problem.get("drift_lipschitz"), diffusion_lipschitz=problem.get("diffusion_lipschitz"),
    )
    terminal = terminal_from_expression(problem["terminal"], d, params, growth=problem.get("terminal_growth"))
    driver = driver_from_expression(problem["driver"], d, params, **(problem.get("driver_constants") or {}))
    obstacle = None
    if problem.get("obstacle") is not None:
        growth = problem.get("obstacle_growth") or {}
        obstacle = obstacle_from_expression(problem["obstacle"], d, params, **growth)
    weight = WeightSpec(**(problem.get("weight") or {}))
    return ProblemSpec(diffusion=diffusion, terminal=terminal, driver=driver, weight=weight,
                       horizon=float(problem.get("horizon", 1.0)), obstacle=obstacle, name=name)


def build_baseline(problem_cfg, baseline, name=""):
    """The comparison problem: the same data with the baseline driver."""
    cfg = dict(problem_cfg)
    cfg["driver"] = baseline["driver"]
    cfg["driver_constants"] = baseline.get("driver_constants") or {}
    return build_problem(cfg, name=name + "/baseline")


def probe_plan(problem):
    return ProbePlan(**(problem.get("probes") or {}))


def build_basis(cfg):
    return BasisSpec(family=cfg["family"], degree=int(cfg.get("degree", 4)), n_bins=int(cfg.get("n_bins", 64)),
                     lo=cfg.get("lo"), hi=cfg.get("hi"))


def scenario_problem(name):
    """The :class:`ProblemSpec` of a registered scenario."""
    cfg = resolve_config({"scenario": name})
    return build_problem(cfg["problem"], name=name)


__all__ = [
    "DEFAULTS", "SCENARIOS", "UnknownScenarioError", "list_scenarios", "deep_merge", "resolve_config",
    "build_problem", "build_baseline", "probe_plan", "build_basis", "scenario_problem",
]
