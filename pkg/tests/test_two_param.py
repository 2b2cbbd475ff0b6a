import numpy as np
import pytest

from fluidq.arrivals import ArrivalRate
from fluidq.distributions import Deterministic, Erlang, Exponential
from fluidq.elapsed import InitialCondition, SolverParams, solve
from fluidq.errors import ConfigError, UnsupportedModelError
from fluidq.two_param import (check_whitt, entry_cumulative, export_heatmap, initial_from_densities,
                              rate_derivative_gap, restart_from_slice, slice_from_trajectory)

DT = 2e-3


@pytest.fixture(scope="module")
def traj():
    return solve(ArrivalRate.constant(2.0), Erlang(2, 2.0), Exponential(0.5), InitialCondition.empty(DT),
                 SolverParams(dt=DT, T=6.0))


def test_slice_masses(traj):
    sl = slice_from_trajectory(traj, 4.0)
    j = traj.index(4.0)
    assert sl.B_cum(np.inf) == pytest.approx(traj.B[j], abs=1e-9)
    assert sl.Q_cum(np.inf) == pytest.approx(traj.Q[j], abs=5e-3)
    assert sl.w == pytest.approx(traj.chi[j])
    assert sl.q_tilde_at_0 == pytest.approx(2.0)


def test_whitt_clauses_small(traj):
    rep = check_whitt(traj, n_times=6, lags=(1, 10))
    assert rep.max_residual < 5e-3
    assert set(rep.residuals) == {"w2", "w3", "w5", "w7", "w8", "w9", "w10"}


def test_rates_match_derivatives(traj):
    gs, ga = rate_derivative_gap(traj)
    assert gs < 1e-2 and ga < 1e-2


def test_entry_cumulative_is_K(traj):
    assert np.max(np.abs(entry_cumulative(traj) - traj.K[: traj.filled + 1])) < 1e-9


def test_restart_reproduces_tail(traj):
    again = restart_from_slice(traj, 3.0)
    j0 = traj.index(3.0)
    n = again.filled + 1
    assert np.max(np.abs(again.X[:n] - traj.X[j0:j0 + n])) < 1e-5


def test_atomic_service_is_unsupported():
    tr = solve(ArrivalRate.constant(1.5), Deterministic(1.0), Exponential(0.5), InitialCondition.empty(DT),
               SolverParams(dt=DT, T=1.0))
    with pytest.raises(UnsupportedModelError):
        check_whitt(tr)


def test_inadmissible_densities_rejected():
    with pytest.raises(ConfigError):
        initial_from_densities([0.1] * 10, [1.0] * 10, 0.1, Exponential(1.0), Exponential(1.0))


def test_heatmap_export(traj, tmp_path):
    export_heatmap(traj, [1.0, 2.0], tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "t,x,b,q_tilde,q" and len(lines) > 10
