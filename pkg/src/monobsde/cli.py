"""Config-driven experiment runner.

Subcommands::

    monobsde run <config.json> [--output-dir DIR] [--workers K]
    monobsde validate <config.json>
    monobsde list-scenarios

Exit codes: 0 all enabled checks passed, 1 a check failed, 2 config error,
3 numerical failure. ``MONOBSDE_OUTPUT_DIR`` overrides the output directory
named in the config.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import oracles
from .bsde import NoContractionError, SolverError, SolverOptions, picard_solve, solve_bsde
from .expr import Expression, ExpressionError
from .fdref import FdError, FdGrid, feynman_kac_compare, solve_obstacle_fd, solve_pde_fd
from .model import IllPosedSpecError, diffusion_from_expressions, validate_problem
from .norms import FlowSampling, NormSampling, equivalence_ratio, flow_ratio_estimate, trapezoid_weights
from .rbsde import (
    ObstacleCompatibilityError,
    estimate_measure,
    skorokhod_residual,
    solve_rbsde_penalized,
    solve_rbsde_reflected,
    weighted_terminal_K,
)
from .scenarios import (
    UnknownScenarioError,
    build_baseline,
    build_basis,
    build_problem,
    list_scenarios,
    probe_plan,
    resolve_config,
)
from .sde import SimulationError, TimeGrid, simulate_bundle

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ENV = "MONOBSDE_OUTPUT_DIR"
SOLVERS = ["bsde", "rbsde-reflected", "rbsde-penalized", "fd", "compare", "picard", "diagnose-norms"]
RESULT_COLUMNS = ["solver", "variant", "point_index", "x", "u", "u_se", "z"]
CONVERGENCE_COLUMNS = ["n_penalty", "point_index", "x", "u", "u_se", "gap_to_reflected", "skorokhod_residual"]

_num = {"type": "number"}
_str = {"type": "string"}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["seed"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "scenario": _str,
        "problem": {
            "type": "object",
            "properties": {
                "dimension": {"type": "integer", "minimum": 1},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "drift": {"type": ["string", "array"]},
                "diffusion": {"type": ["string", "array"]},
                "terminal": _str,
                "driver": _str,
                "obstacle": {"type": ["string", "null"]},
                "params": {"type": "object", "additionalProperties": _num},
                "driver_constants": {"type": "object"},
                "obstacle_growth": {"type": "object"},
                "weight": {"type": "object"},
                "probes": {"type": "object"},
            },
        },
        "grid": {
            "type": "object",
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "M": {"type": "integer", "minimum": 1},
                "points": {"type": "array", "minItems": 1, "items": {"type": "array", "items": _num}},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "basis": {
            "type": "object",
            "properties": {"family": {"enum": ["polynomial", "bins", "local_polynomial"]},
                           "degree": {"type": "integer", "minimum": 0},
                           "n_bins": {"type": "integer", "minimum": 1}},
        },
        "solver_options": {"type": "object"},
        "solvers": {"type": "array", "items": {"enum": SOLVERS}},
        "penalty_schedule": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "fd": {"type": "object"},
        "oracle": {"type": ["object", "null"]},
        "baseline": {"type": ["object", "null"]},
        "picard": {"type": "object"},
        "norms": {"type": "object"},
        "measure": {"type": "object"},
        "tolerances": {"type": "object"},
        "output_dir": _str,
        "dump_bundle": {"type": "boolean"},
        "write_fd_csv": {"type": "boolean"},
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def _f(value):
    """Shortest round-trip text for a float; empty for missing values."""
    if value is None:
        return ""
    value = float(value)
    return repr(value)


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return check_config(raw)


def check_config(raw):
    """Schema validation plus the rules the schema cannot express; returns the resolved config."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "seed" not in raw:
        raise ConfigError("seed required")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    if raw.get("scenario") is None and "problem" not in raw:
        raise ConfigError("config needs a scenario name or an inline problem")
    cfg = resolve_config(raw)
    for key in ("drift", "diffusion", "terminal", "driver"):
        if key not in cfg["problem"]:
            raise ConfigError(f"problem.{key} missing")
    return cfg


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------


def oracle_values(oracle, points, horizon):
    """Reference ``u(0, x_j)`` (and ``z`` where known) for the configured oracle kind."""
    if not oracle:
        return None, None
    kind = oracle["kind"]
    x = np.asarray(points, dtype=float)[:, 0]
    if kind == "cubic":
        u = np.full(x.shape, float(oracles.cubic_driver_solution(oracle.get("c", 1.0), horizon)))
        return u, np.zeros_like(u)
    if kind == "linear":
        u = np.full(x.shape, float(oracles.linear_driver_solution(oracle.get("c", 1.0), horizon,
                                                                  oracle.get("rate", 1.0))))
        return u, np.zeros_like(u)
    if kind == "heat_gaussian":
        return oracles.heat_gaussian(x, horizon, oracle.get("width", 1.0), oracle.get("diffusivity", 1.0)), None
    if kind == "bs_call":
        pairs = [oracles.black_scholes_call(s, oracle["strike"], oracle["rate"], oracle["vol"], horizon) for s in x]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
    if kind == "crr_put":
        u = [oracles.crr_american_put(s, oracle["strike"], oracle["rate"], oracle["vol"], horizon,
                                      int(oracle.get("steps", 2000))) for s in x]
        return np.array(u), None
    if kind == "brownian_indicator":
        return None, None
    raise ConfigError(f"unknown oracle kind {kind!r}")


# --------------------------------------------------------------------------
# the run
# --------------------------------------------------------------------------


class _Run:
    def __init__(self, cfg, workers=None):
        self.cfg = cfg
        self.rows = []
        self.convergence = []
        self.checks = []
        self.headline = {}
        self.extra_files = {}
        if workers is not None:
            cfg["grid"]["workers"] = int(workers)

    def check(self, name, passed, value=None, threshold=None, detail=""):
        if any(c["name"] == name for c in self.checks):
            raise RuntimeError(f"check {name!r} recorded twice")
        status = "skip" if passed is None else ("pass" if passed else "fail")
        self.checks.append({"name": name, "status": status, "value": value, "threshold": threshold,
                            "detail": detail})

    def add_rows(self, solver, variant, points, u, se=None, z=None):
        for j, x in enumerate(points):
            self.rows.append([solver, variant, j, ";".join(_f(v) for v in x), _f(u[j]),
                              _f(None if se is None else se[j]), _f(None if z is None else z[j])])

    def oracle_check(self, name, u, se, oracle_u, abs_tol, rel_tol, k=None):
        if oracle_u is None:
            self.check(name, None, detail="no oracle for this scenario")
            return
        err = np.abs(np.asarray(u) - oracle_u)
        tol = np.maximum(abs_tol, rel_tol * np.abs(oracle_u))
        if k is not None and se is not None:
            tol = np.maximum(tol, k * np.asarray(se))
        self.check(name, bool(np.all(err <= tol)), float(err.max()), float(tol.min()),
                   "max |estimate - oracle| against max(abs, rel * |oracle|, k * se)")
        return err

    def execute(self):
        cfg = self.cfg
        name = cfg.get("scenario") or "inline"
        problem = build_problem(cfg["problem"], name)
        report = validate_problem(problem, probe_plan(cfg["problem"]))
        failed = [c.name for c in report.failures()]
        self.check("validate_problem", report.passed, detail=", ".join(failed))
        self.headline["validation"] = {c.name: {"passed": c.passed, "worst": c.worst, "note": c.note}
                                       for c in report.checks}

        g, tol = cfg["grid"], cfg["tolerances"]
        points = np.asarray(g["points"], dtype=float).reshape(-1, problem.dimension)
        solvers = list(cfg["solvers"])
        grid = TimeGrid.uniform(problem.horizon, int(g["N"]))
        basis = build_basis(cfg["basis"])
        opts = SolverOptions(**cfg["solver_options"])
        k = float(tol["se_multiple"])
        oracle_u, oracle_z = oracle_values(cfg["oracle"], points, problem.horizon)
        if oracle_u is not None:
            self.add_rows("oracle", cfg["oracle"]["kind"], points, oracle_u, None, oracle_z)
            self.headline["oracle"] = {"u": oracle_u, "z": oracle_z}

        bundle = None
        if set(solvers) & {"bsde", "rbsde-reflected", "rbsde-penalized", "picard"}:
            bundle = simulate_bundle(problem.diffusion, grid, points, int(g["M"]), int(cfg["seed"]),
                                     workers=int(g["workers"]))
            if cfg["dump_bundle"]:
                self.extra_files["bundle.bin"] = bundle.dump

        baseline = None
        if cfg.get("baseline"):
            baseline = build_baseline(cfg["problem"], cfg["baseline"], name)
        mc = {}

        if "bsde" in solvers:
            sol = solve_bsde(problem, bundle, basis, opts)
            mc["bsde"] = sol
            self.add_rows("bsde", "", points, sol.u, sol.u_se, sol.z0[:, 0])
            err = self.oracle_check("bsde.oracle", sol.u, sol.u_se, oracle_u, tol["oracle_abs"], tol["oracle_rel"], k)
            self.headline["bsde"] = self._headline(sol.u, sol.u_se, oracle_u, err)

        if "rbsde-reflected" in solvers or "rbsde-penalized" in solvers:
            if problem.obstacle is None:
                raise ConfigError("reflected solvers need problem.obstacle")

        if "rbsde-reflected" in solvers:
            sol = solve_rbsde_reflected(problem, problem.obstacle, bundle, basis, opts)
            mc["rbsde-reflected"] = sol
            self.add_rows("rbsde-reflected", "", points, sol.u, sol.u_se, sol.z0[:, 0])
            err = self.oracle_check("rbsde-reflected.oracle", sol.u, sol.u_se, oracle_u,
                                    tol["oracle_abs"], tol["oracle_rel"])
            head = self._headline(sol.u, sol.u_se, oracle_u, err)
            resid = skorokhod_residual(sol, problem.obstacle, bundle)
            self.check("rbsde-reflected.skorokhod_zero", bool(np.all(resid == 0)), float(resid.max()), 0.0)
            head["skorokhod_residual"] = resid
            if problem.dimension == 1:
                mcfg = cfg["measure"]
                edges = np.linspace(bundle.X[..., 0].min(), bundle.X[..., 0].max(), int(mcfg["n_bins"]) + 1)
                meas = estimate_measure(sol, bundle, problem.obstacle, problem.weight, edges, mcfg["contact_tol"])
                kt = weighted_terminal_K(sol, bundle, problem.weight)
                gap = abs(meas.weighted_total - kt)
                self.check("measure.identity", gap <= 1e-10 * max(1.0, abs(kt)), gap, 1e-10)
                frac = meas.contact_fraction()
                self.check("measure.contact_fraction", frac >= mcfg["min_contact_fraction"], frac,
                           mcfg["min_contact_fraction"])
                head["measure"] = {"weighted_total": meas.weighted_total, "weighted_K_N": kt,
                                   "contact_fraction": frac}
                self.extra_files["measure.csv"] = meas.to_csv
            self.headline["rbsde-reflected"] = head

        if "rbsde-penalized" in solvers:
            self._penalized(problem, bundle, basis, opts, points, mc, oracle_u, k)

        fd = None
        if "fd" in solvers:
            fd = self._fd(problem, points, oracle_u)

        if "compare" in solvers:
            self._compare(fd, mc, problem, points, oracle_z)

        if "picard" in solvers:
            pc = cfg["picard"]
            sol, rep = picard_solve(problem, bundle, basis, max_iter=int(pc["max_iter"]), tol=float(pc["tol"]),
                                    k1=float(pc.get("k1", 1.0)), k2=float(pc.get("k2", 1.0)), opts=opts)
            self.add_rows("picard", f"iterations={rep.iterations}", points, sol.u, sol.u_se, sol.z0[:, 0])
            ratios = rep.ratios
            self.check("picard.contraction", bool(all(r < 0.9 for r in ratios)), max(ratios, default=0.0), 0.9)
            converged = rep.norms[-1] < float(pc["tol"])
            self.check("picard.converged", bool(converged), rep.norms[-1], float(pc["tol"]),
                       f"{rep.iterations} iterations, max {pc['max_iter']}")
            self.headline["picard"] = {"u": sol.u, "u_se": sol.u_se, "norms": rep.norms, "ratios": ratios,
                                       "gamma": rep.gamma, "alpha": rep.alpha}

        if "diagnose-norms" in solvers:
            self._norms(problem, grid)

        if baseline is not None:
            self._premium(baseline, bundle, basis, opts, points, mc, fd, k)

    @staticmethod
    def _headline(u, se, oracle_u, err):
        head = {"u": u, "u_se": se}
        if oracle_u is not None:
            head["oracle"] = oracle_u
            head["abs_error"] = err
            head["relative_error"] = err / np.maximum(np.abs(oracle_u), 1e-300)
        return head

    def _penalized(self, problem, bundle, basis, opts, points, mc, oracle_u, k):
        cfg, tol = self.cfg, self.cfg["tolerances"]
        schedule = sorted(float(n) for n in cfg["penalty_schedule"])
        if not schedule:
            raise ConfigError("penalty_schedule is empty")
        refl = mc.get("rbsde-reflected")
        sols, resid = [], []
        for n in schedule:
            sol = solve_rbsde_penalized(problem, problem.obstacle, n, bundle, basis, opts)
            sols.append(sol)
            r = skorokhod_residual(sol, problem.obstacle, bundle)
            resid.append(r)
            self.add_rows("rbsde-penalized", f"n={_f(n)}", points, sol.u, sol.u_se, sol.z0[:, 0])
            for j, x in enumerate(points):
                gap = None if refl is None else abs(refl.u[j] - sol.u[j])
                self.convergence.append([_f(n), j, ";".join(_f(v) for v in x), _f(sol.u[j]), _f(sol.u_se[j]),
                                         _f(gap), _f(r[j])])
        mc["rbsde-penalized"] = sols[-1]
        worst = 0.0
        for a, b in zip(sols[:-1], sols[1:]):
            pooled = np.sqrt(a.u_se ** 2 + b.u_se ** 2)
            worst = max(worst, float(np.max((a.u - b.u) - k * pooled)))
        self.check("rbsde-penalized.monotone", worst <= 0.0, worst, 0.0,
                   "max over steps of u_n - u_next - k * pooled se")
        dec = all(np.all(b < a) for a, b in zip(resid[:-1], resid[1:]))
        self.check("rbsde-penalized.skorokhod_decreasing", bool(dec), float(np.max(resid[-1])))
        if refl is not None and len(sols) >= 2:
            g_last = np.abs(refl.u - sols[-1].u)
            g_prev = np.abs(refl.u - sols[-2].u)
            self.check("rbsde-penalized.gap_shrinks", bool(np.all(g_last < g_prev)), float(g_last.max()),
                       float(g_prev.min()))
        else:
            self.check("rbsde-penalized.gap_shrinks", None, detail="needs rbsde-reflected and two penalties")
        err = self.oracle_check("rbsde-penalized.oracle", sols[-1].u, sols[-1].u_se, oracle_u,
                                tol["oracle_abs"], tol["oracle_rel"])
        head = self._headline(sols[-1].u, sols[-1].u_se, oracle_u, err)
        head["schedule"] = schedule
        head["u_by_n"] = [s.u for s in sols]
        head["skorokhod_residual_by_n"] = resid
        self.headline["rbsde-penalized"] = head

    def _fd_grid(self):
        c = self.cfg["fd"]
        return FdGrid(float(c["x_lo"]), float(c["x_hi"]), int(c["nx"]), int(c["nt"]), c.get("boundary", "dirichlet"))

    def _fd(self, problem, points, oracle_u):
        c, tol = self.cfg["fd"], self.cfg["tolerances"]
        grid = self._fd_grid()
        theta = float(c.get("theta", 1.0))
        plain = solve_pde_fd(problem, grid, theta=theta, rannacher=int(c.get("rannacher", 2)))
        fd = plain
        if problem.obstacle is not None:
            method = c.get("method", "projected-sor")
            fd = solve_obstacle_fd(problem, problem.obstacle, grid, method=method,
                                   n_penalty=c.get("n_penalty"), theta=theta)
            gap = float(np.min(fd.u - plain.u))
            self.check("fd.dominance", gap >= 0.0, gap, 0.0, "min over nodes of u_obstacle - u_plain")
            pts = grid.x[:, None]
            hmin = min(float(np.min(fd.u[n] - problem.obstacle(fd.t[n], pts))) for n in range(fd.t.size))
            self.check("fd.above_obstacle", hmin >= 0.0, hmin, 0.0)
        x = points[:, 0]
        u, du = fd.at(x), fd.du_at(x)
        self.add_rows("fd", fd.method, points, u, None, du)
        err = self.oracle_check("fd.oracle", u, None, oracle_u, tol["fd_abs"], tol["fd_rel"])
        self.headline["fd"] = self._headline(u, None, oracle_u, err)
        self.headline["fd"]["du"] = du
        if self.cfg["write_fd_csv"]:
            self.extra_files["fd.csv"] = fd.to_csv
        return fd

    def _compare(self, fd, mc, problem, points, oracle_z):
        tol = self.cfg["tolerances"]
        if fd is None or not mc:
            self.check("compare.fd_mc", None, detail="needs fd and a Monte Carlo solver")
            return
        key = next(s for s in ("bsde", "rbsde-reflected", "rbsde-penalized") if s in mc)
        sol = mc[key]
        lo, hi = float(points[:, 0].min()), float(points[:, 0].max())
        rep = feynman_kac_compare(fd, sol, points, problem.weight, (lo, hi))
        rel = np.abs(rep.mc_values - rep.fd_values) / np.maximum(np.abs(rep.fd_values), 1e-300)
        head = {"solver": key, "relative_u": rep.relative_u, "relative_z": rep.relative_z,
                "z_scores": rep.z_scores, "pointwise_relative_u": rel}
        if tol.get("compare_rel") is not None:
            self.check("compare.u", bool(np.all(rel <= tol["compare_rel"])), float(rel.max()), tol["compare_rel"])
        else:
            within = rep.fraction_within(tol["se_multiple"])
            self.check("compare.u", within >= 0.95, within, 0.95, "fraction of |z-score| <= k")
        if tol.get("z_rel") is not None:
            z_mc = sol.z0[:, 0]
            z_fd = fd.du_at(points[:, 0])
            zr = np.abs(z_mc - z_fd) / np.maximum(np.abs(z_fd), 1e-300)
            self.check("compare.z_fd", bool(np.all(zr <= tol["z_rel"])), float(zr.max()), tol["z_rel"])
            head["z_relative_fd"] = zr
            if oracle_z is not None:
                zo = np.abs(z_mc - oracle_z) / np.maximum(np.abs(oracle_z), 1e-300)
                self.check("compare.z_oracle", bool(np.all(zo <= tol["z_rel"])), float(zo.max()), tol["z_rel"])
                head["z_relative_oracle"] = zo
        self.headline["compare"] = head

    def _norms(self, problem, grid):
        c = self.cfg["norms"]
        psi_expr = Expression(c["psi"], ("t", "x"), self.cfg["problem"].get("params"))

        def psi(t, x):
            return np.broadcast_to(psi_expr(t=t, x=x[:, 0]), (x.shape[0],))

        sampling = NormSampling(c["x_lo"], c["x_hi"], int(c["n_points"]), int(c["M"]), int(self.cfg["seed"]),
                                int(self.cfg["grid"]["workers"]))
        frozen = diffusion_from_expressions("0", "0")
        fr = equivalence_ratio(frozen, problem.weight, psi, grid, sampling, name=c["psi"])
        self.check("norms.frozen_ratio", abs(fr.ratio - 1.0) <= 1e-6, abs(fr.ratio - 1.0), 1e-6)
        rep = equivalence_ratio(problem.diffusion, problem.weight, psi, grid, sampling, name=c["psi"])
        head = {"frozen_ratio": fr.ratio, "ratio": rep.ratio, "std_error": rep.std_error,
                "plain": rep.plain, "composed": rep.composed}
        self.rows.append(["norms", "frozen", 0, "", _f(fr.ratio), _f(fr.std_error), ""])
        self.rows.append(["norms", "flow", 0, "", _f(rep.ratio), _f(rep.std_error), ""])
        oracle = self.cfg.get("oracle") or {}
        if oracle.get("kind") == "brownian_indicator":
            x = np.linspace(sampling.x_lo, sampling.x_hi, sampling.n_points)
            wx, wt = trapezoid_weights(x), trapezoid_weights(grid.knots)
            rho = problem.weight(x[:, None])
            comp = sum(wt[i] * np.sum(wx * rho * oracles.brownian_indicator_mean(x, t - grid.knots[0]))
                       for i, t in enumerate(grid.knots))
            expected = comp / rep.plain
            dev = abs(rep.ratio - expected)
            self.check("norms.brownian_oracle", dev <= 3.0 * rep.std_error, dev, 3.0 * rep.std_error)
            head["oracle_ratio"] = expected
        else:
            self.check("norms.brownian_oracle", None, detail="no heat-kernel oracle for this diffusion")
        fs = FlowSampling(c["flow_source"][0], c["flow_source"][1], int(c["flow_n_source"]), int(c["flow_M"]),
                          c["flow_report"][0], c["flow_report"][1], int(c["flow_bins"]), int(self.cfg["seed"]))
        flow = flow_ratio_estimate(problem.diffusion, problem.weight, grid, fs)
        head["flow_c1"], head["flow_c2"] = flow.c1, flow.c2
        head["flow_empty_bins"] = int(flow.empty.sum())
        self.check("norms.flow_ratio_finite", bool(np.isfinite(flow.c1) and flow.c1 > 0 and np.isfinite(flow.c2)),
                   flow.c1)
        self.headline["norms"] = head

    def _premium(self, baseline, bundle, basis, opts, points, mc, fd, k):
        head = {}
        if fd is not None:
            grid = self._fd_grid()
            c = self.cfg["fd"]
            if baseline.obstacle is not None:
                base_fd = solve_obstacle_fd(baseline, baseline.obstacle, grid, method=c.get("method", "projected-sor"),
                                            n_penalty=c.get("n_penalty"), theta=float(c.get("theta", 1.0)))
            else:
                base_fd = solve_pde_fd(baseline, grid, theta=float(c.get("theta", 1.0)))
            x = points[:, 0]
            prem = fd.at(x) - base_fd.at(x)
            self.add_rows("fd-baseline", base_fd.method, points, base_fd.at(x), None, base_fd.du_at(x))
            self.check("premium.fd_nonnegative", bool(np.all(prem >= -1e-9)), float(prem.min()), -1e-9)
            head["fd"] = prem
        key = next((s for s in ("rbsde-reflected", "bsde") if s in mc), None)
        if key is not None:
            if key == "rbsde-reflected":
                base = solve_rbsde_reflected(baseline, baseline.obstacle, bundle, basis, opts)
            else:
                base = solve_bsde(baseline, bundle, basis, opts)
            prem = mc[key].u - base.u
            self.add_rows(key + "-baseline", "", points, base.u, base.u_se, base.z0[:, 0])
            pooled = np.sqrt(mc[key].u_se ** 2 + base.u_se ** 2)
            self.check("premium.mc_nonnegative", bool(np.all(prem >= -k * pooled)), float(prem.min()),
                       float(-k * pooled.max()))
            head["mc"] = prem
            head["mc_solver"] = key
        self.headline["premium"] = head


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def output_directory(cfg, override=None):
    return Path(override or os.environ.get(OUTPUT_ENV) or cfg["output_dir"])


def run_experiment(cfg, output_dir=None, workers=None):
    """Run a resolved config. Returns ``(exit_code, summary)`` and writes the artifact files."""
    start = time.perf_counter()
    run = _Run(cfg, workers)
    code, error = EXIT_OK, None
    try:
        run.execute()
    except (ConfigError, ExpressionError, UnknownScenarioError, IllPosedSpecError, ObstacleCompatibilityError,
            KeyError, TypeError) as exc:
        code, error = EXIT_CONFIG, f"config error: {exc}"
    except NoContractionError as exc:
        code, error = EXIT_NUMERIC, f"numerical failure: {exc}"
        run.headline["picard"] = {"norms": exc.report.norms, "ratios": exc.report.ratios}
    except (SolverError, FdError, SimulationError, ArithmeticError, np.linalg.LinAlgError) as exc:
        code, error = EXIT_NUMERIC, f"numerical failure: {exc}"
    except ValueError as exc:
        code, error = EXIT_CONFIG, f"config error: {exc}"
    if code == EXIT_OK and any(c["status"] == "fail" for c in run.checks):
        code = EXIT_CHECK
    summary = {
        "status": {EXIT_OK: "pass", EXIT_CHECK: "check failed", EXIT_CONFIG: "config error",
                   EXIT_NUMERIC: "numerical failure"}[code],
        "exit_code": code,
        "error": error,
        "failed_checks": [c["name"] for c in run.checks if c["status"] == "fail"],
        "checks": run.checks,
        "headline": run.headline,
        "config": cfg,
        "wall_clock_seconds": time.perf_counter() - start,
    }
    summary = _json_safe(summary)
    out = output_directory(cfg, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "results.csv", RESULT_COLUMNS, run.rows)
    if run.convergence:
        _write_csv(out / "convergence.csv", CONVERGENCE_COLUMNS, run.convergence)
    if code in (EXIT_OK, EXIT_CHECK):
        for fname, writer in run.extra_files.items():
            writer(out / fname)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return code, summary


def _cmd_run(args):
    try:
        cfg = load_config(args.config)
    except UnknownScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    code, summary = run_experiment(cfg, args.output_dir, args.workers)
    out = output_directory(cfg, args.output_dir)
    print(f"{summary['status']}: {len(summary['checks'])} checks, results in {out}")
    for c in summary["checks"]:
        print(f"  [{c['status']}] {c['name']}")
    if summary["error"]:
        print(summary["error"], file=sys.stderr)
    return code


def _cmd_validate(args):
    try:
        cfg = load_config(args.config)
        problem = build_problem(cfg["problem"], cfg.get("scenario") or "inline")
        report = validate_problem(problem, probe_plan(cfg["problem"]))
    except UnknownScenarioError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ExpressionError, IllPosedSpecError, ValueError, TypeError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    for c in report.checks:
        mark = "pass" if c.passed else "FAIL"
        note = f"  ({c.note})" if c.note else ""
        print(f"{mark:4s}  {c.name:32s} worst={c.worst:.6g}{note}")
    return EXIT_OK if report.passed else EXIT_CHECK


def _cmd_list(args):
    for name, desc in list_scenarios():
        print(f"{name:28s} {desc}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="monobsde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help=f"overrides the config and ${OUTPUT_ENV}")
    p.add_argument("--workers", type=int, default=None, help="simulation threads (results do not depend on it)")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("validate", help="check the structural assumptions of a config's problem")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)
    p = sub.add_parser("list-scenarios", help="print the scenario registry")
    p.set_defaults(func=_cmd_list)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
