import numpy as np
import pytest

from monobsde.model import (
    ProblemSpec,
    WeightSpec,
    diffusion_from_expressions,
    driver_from_expression,
    obstacle_from_expression,
    terminal_from_expression,
)

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_problem(drift="0", diffusion="1", terminal="0", driver="0", obstacle=None, horizon=1.0, params=None,
                 weight=None, **driver_constants):
    params = params or {}
    obs = None if obstacle is None else obstacle_from_expression(obstacle, params=params, kappa=100.0)
    return ProblemSpec(
        diffusion=diffusion_from_expressions(drift, diffusion, params=params),
        terminal=terminal_from_expression(terminal, params=params),
        driver=driver_from_expression(driver, params=params, **driver_constants),
        weight=weight or WeightSpec(),
        horizon=horizon,
        obstacle=obs,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
