from dataclasses import replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fluidq.elapsed import solve
from fluidq.scenario import load

settings.register_profile("default", deadline=None, suppress_health_check=(HealthCheck.too_slow,))
settings.load_profile("default")

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
SUITE = ("overloaded", "underloaded", "critical", "sinusoidal", "deterministic_service",
         "uniform_patience", "layer_feasible")
DENSITY_SUITE = tuple(s for s in SUITE if s != "deterministic_service")


@lru_cache(maxsize=None)
def scenario(name: str, dt: float | None = None):
    return load(SCENARIOS / f"{name}.json", dt=dt)


@lru_cache(maxsize=None)
def trajectory(name: str, dt: float | None = None, T: float | None = None):
    sc = scenario(name, dt)
    p = sc.params
    if T is not None:
        p = replace(p, T=T)
    return solve(sc.rate, sc.Gs, sc.Gr, sc.initial_condition(), p)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
