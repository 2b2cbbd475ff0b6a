import csv

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from fluidq.arrivals import ArrivalRate
from fluidq.distributions import Deterministic, Erlang, Exponential, Uniform
from fluidq.elapsed import COLUMNS, InitialCondition, SolverParams, solve, validate_initial
from fluidq.errors import ConfigError
from fluidq.measures import GridMeasure, Interval


def mm(lam, T=8.0, dt=2e-3, ic=None):
    ic = ic or InitialCondition.empty(dt)
    return solve(ArrivalRate.constant(lam), Exponential(1.0), Exponential(0.5), ic, SolverParams(dt=dt, T=T))


def ode(lam, t):
    f = lambda _, x: [lam - min(x[0], 1.0) - 0.5 * max(x[0] - 1.0, 0.0)]
    return solve_ivp(f, (0, t[-1]), [0.0], t_eval=t, rtol=1e-10, atol=1e-12, max_step=0.01).y[0]


@pytest.mark.parametrize("lam", [0.7, 1.0, 2.0])
def test_markovian_matches_ode(lam):
    tr = mm(lam)
    assert np.max(np.abs(tr.X - ode(lam, tr.t))) < 5e-3


@pytest.mark.parametrize("lam", [0.7, 2.0])
def test_balance_and_monotonicity(lam):
    res = mm(lam).balance_residuals()
    assert max(res["total"], res["queue"], res["server"], res["non_idling"]) < 1e-10
    assert res["k_monotone"] >= -1e-12
    assert res["chi_lipschitz"] <= 1e-9


def test_state_masses_match_columns():
    tr = mm(2.0, T=4.0)
    for j in (0, 500, 1999):
        s = tr.state(j)
        assert tr.nu(j).total_mass == pytest.approx(tr.B[j], abs=1e-9)
        assert tr.eta(j).mass(Interval.closed(0.0, tr.chi[j])) == pytest.approx(tr.Q[j], abs=5e-3)
        assert s.X == pytest.approx(tr.X[j])


def test_deterministic_service_departures_lag_entries():
    dt = 2e-3
    tr = solve(ArrivalRate.constant(0.6), Deterministic(1.0), Exponential(1.0), InitialCondition.empty(dt),
               SolverParams(dt=dt, T=3.0))
    j = tr.index(2.5)
    assert tr.D[j] == pytest.approx(tr.K[tr.index(1.5)], abs=1e-9)


def _atomic_start(dt):
    edges = GridMeasure.uniform_grid(dt, 1.0)
    nu0 = GridMeasure(edges, np.zeros(edges.size - 1), np.array([0.25]), np.array([0.5]))
    return InitialCondition(GridMeasure.zero(edges), nu0, 0.5)


def test_initial_atom_thins_by_survival_ratio():
    dt, law = 1e-2, Erlang(2, 2.0)
    tr = solve(ArrivalRate.constant(0.0), law, Exponential(1.0), _atomic_start(dt), SolverParams(dt=dt, T=1.0))
    for t in (0.3, 0.7, 1.0):
        want = 0.5 * float(law.ccdf(0.25 + t)) / float(law.ccdf(0.25))
        assert tr.B[tr.index(t)] == pytest.approx(want, rel=1e-9)


def test_atoms_on_atoms_rejected():
    with pytest.raises(ConfigError):
        solve(ArrivalRate.constant(0.0), Deterministic(1.0), Exponential(1.0), _atomic_start(1e-2),
              SolverParams(dt=1e-2, T=1.0))


def test_uniform_patience_caps_wait():
    tr = solve(ArrivalRate.constant(3.0), Exponential(1.0), Uniform(0.0, 2.0), InitialCondition.empty(5e-3),
               SolverParams(dt=5e-3, T=10.0))
    assert np.all(tr.chi <= 2.0 + 1e-9)


def test_time_varying_rate():
    dt = 2e-3
    tr = solve(ArrivalRate.sinusoid(1.0, 0.6, 0.5), Erlang(2, 2.0), Exponential(1.0), InitialCondition.empty(dt),
               SolverParams(dt=dt, T=6.0))
    res = tr.balance_residuals()
    assert res["total"] < 1e-10 and res["non_idling"] < 1e-12


def test_validate_initial_flags_idle_servers_with_queue():
    dt = 1e-2
    edges = GridMeasure.uniform_grid(dt, 1.0)
    half = GridMeasure.from_cell_masses(edges, np.full(edges.size - 1, 0.5 / (edges.size - 1)))
    ok = validate_initial(InitialCondition(GridMeasure.zero(edges), half, 0.5))
    bad = validate_initial(InitialCondition(half, half, 1.0))
    assert ok and not bad


def test_params_reject_mismatched_age_step():
    with pytest.raises(ConfigError):
        SolverParams(dt=1e-3, da=2e-3)


def test_csv_has_header_and_12_digits(tmp_path):
    tr = mm(2.0, T=0.1)
    tr.to_csv(tmp_path / "x.csv")
    rows = list(csv.reader(open(tmp_path / "x.csv")))
    assert rows[0] == list(COLUMNS)
    assert float(rows[-1][1]) == pytest.approx(tr.X[-1], rel=1e-11)
