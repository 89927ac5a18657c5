import pytest

from monobsde.model import validate_problem
from monobsde.scenarios import (
    SCENARIOS,
    UnknownScenarioError,
    build_baseline,
    deep_merge,
    list_scenarios,
    probe_plan,
    resolve_config,
    scenario_problem,
)

REQUIRED = {"linear_driver", "cubic_driver", "bs_european_call", "american_put", "american_put_constrained",
            "heat_equation", "norm_diagnostics"}


def test_registry_contains_required_names():
    names = [n for n, _ in list_scenarios()]
    assert REQUIRED <= set(names)
    assert len(names) == len(set(names))
    assert all(desc for _, desc in list_scenarios())


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_every_scenario_passes_validation(name):
    cfg = resolve_config({"scenario": name})
    report = validate_problem(scenario_problem(name), probe_plan(cfg["problem"]))
    assert report.passed, [c.name for c in report.checks if not c.passed]


def test_constrained_baseline_also_validates():
    cfg = resolve_config({"scenario": "american_put_constrained"})
    base = build_baseline(cfg["problem"], cfg["baseline"], "american_put_constrained")
    assert validate_problem(base, probe_plan(cfg["problem"])).passed


def test_merge_order_defaults_scenario_user():
    cfg = resolve_config({"scenario": "cubic_driver", "grid": {"M": 7}, "seed": 3})
    assert cfg["grid"]["M"] == 7
    assert cfg["grid"]["workers"] == 1  # default survives
    assert cfg["problem"]["driver"] == SCENARIOS["cubic_driver"]["problem"]["driver"]
    assert cfg["scenario"] == "cubic_driver"


def test_deep_merge_does_not_alias():
    base = {"a": {"b": [1]}}
    out = deep_merge(base, {"a": {"c": 2}})
    out["a"]["b"].append(5)
    assert base == {"a": {"b": [1]}}


def test_unknown_scenario_lists_registry():
    with pytest.raises(UnknownScenarioError) as err:
        resolve_config({"scenario": "nope"})
    assert "cubic_driver" in str(err.value) and "nope" in str(err.value)
