import math

import numpy as np
import pytest
from scipy import integrate

from fluidq.arrivals import ArrivalRate
from fluidq.distributions import Deterministic, Erlang, Exponential, Weibull
from fluidq.elapsed import InitialCondition, SolverParams, solve
from fluidq.errors import UnsupportedModelError
from fluidq.measures import GridMeasure
from fluidq.residual import (check_coupling, check_initial_identities, eta_tail, nu_tail, residual_densities,
                             residual_slice, varsigma0)

DT = 2e-3


def layer(dt, lam=1.5, a=0.5, Gr=Weibull(1.5, 1.0)):
    edges = GridMeasure.uniform_grid(dt, a)
    eta = GridMeasure.from_cell_masses(edges, lam * np.diff(Gr.integrated_ccdf(edges)))
    nu = GridMeasure.from_cell_masses(GridMeasure.uniform_grid(dt, 1.0), np.full(int(round(1 / dt)), dt))
    return InitialCondition(eta, nu, 1 + eta.total_mass)


@pytest.fixture(scope="module")
def traj():
    return solve(ArrivalRate.constant(1.5), Erlang(2, 2.0), Weibull(1.5, 1.0), layer(DT),
                 SolverParams(dt=DT, T=6.0))


def test_tails_at_zero_are_masses(traj):
    for t in (0.0, 1.0, 3.0):
        j = traj.index(t)
        assert nu_tail(traj, t, 0.0)[0] == pytest.approx(traj.B[j], abs=1e-6)  # O(dt^2) quadrature gap
        assert eta_tail(traj, t, 0.0)[0] == pytest.approx(traj.Q[j], abs=5e-3)


def test_tails_decrease(traj):
    z = np.linspace(0.0, 3.0, 31)
    assert np.all(np.diff(nu_tail(traj, 2.0, z)) <= 1e-15)
    assert np.all(np.diff(eta_tail(traj, 2.0, z)) <= 1e-15)


def test_coupling_small(traj):
    rep = check_coupling(traj, n=6)
    assert rep.max_residual < 5e-3


def test_initial_identities():
    ic = layer(1e-2)
    res = check_initial_identities(ic, Erlang(2, 2.0), Weibull(1.5, 1.0), np.linspace(0.0, 2.0, 9))
    assert res["nu"] < 1e-12 and res["eta"] < 1e-12
    assert res["varsigma0"] == pytest.approx(varsigma0(ic))
    assert varsigma0(ic) == pytest.approx(-0.5, abs=1e-2)


def test_densities_integrate_to_tails(traj):
    t = 2.0
    z = np.array([0.2, 0.7, 1.5])
    for k, z0 in enumerate(z):
        b_int = integrate.quad(lambda y: residual_densities(traj, t, y)[0][0], z0, 8.0, limit=200)[0]
        q_int = integrate.quad(lambda y: residual_densities(traj, t, y)[1][0], z0, 8.0, limit=200)[0]
        assert b_int == pytest.approx(nu_tail(traj, t, z0)[0] - nu_tail(traj, t, 8.0)[0], abs=1e-6)
        assert q_int == pytest.approx(eta_tail(traj, t, z0)[0] - eta_tail(traj, t, 8.0)[0], abs=1e-6)


def test_residual_slice_measures(traj):
    rs = residual_slice(traj, 3.0)
    assert rs.nu_res.total_mass == pytest.approx(rs.nu_tail[0], abs=1e-9)
    assert rs.varsigma == pytest.approx(3.0 - traj.chi[traj.index(3.0)])
    assert rs.mean_residual_work() > 0


def test_densities_need_densities():
    tr = solve(ArrivalRate.constant(1.0), Deterministic(1.0), Exponential(1.0), InitialCondition.empty(DT),
               SolverParams(dt=DT, T=1.0))
    nu_tail(tr, 0.5, [0.1])
    with pytest.raises(UnsupportedModelError):
        residual_densities(tr, 0.5, [0.1])


def test_coupling_csv(traj, tmp_path):
    rep = check_coupling(traj, n=3)
    rep.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("t,z,nu_tail,eta_tail,coupling_residual")
    assert math.isfinite(rep.max_residual)
