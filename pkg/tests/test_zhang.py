import numpy as np
import pytest

from fluidq.arrivals import ArrivalRate
from fluidq.distributions import Deterministic, Erlang, Exponential, Uniform, Weibull
from fluidq.elapsed import InitialCondition, SolverParams, solve
from fluidq.errors import ConfigError
from fluidq.measures import GridMeasure
from fluidq.zhang import (ZhangInitial, check_density_condition, con2_tail, con4_eta0, fit_nu0, solve_zhang,
                          zhang_from_zuniga, zuniga_from_zhang)

DT = 2e-3


def nu_uniform(dt):
    return GridMeasure.from_cell_masses(GridMeasure.uniform_grid(dt, 1.0), np.full(int(round(1 / dt)), dt))


def layer_ic(lam, Gr, a, dt, scale=1.0):
    eta = con4_eta0(lam * scale, Gr, a, dt)
    nu = nu_uniform(dt)
    return InitialCondition(eta, nu, 1.0 + eta.total_mass)


@pytest.mark.parametrize("lam", [0.7, 2.0])
def test_empty_start_matches_elapsed(lam):
    Gs, Gr = Exponential(1.0), Exponential(0.5)
    p = SolverParams(dt=DT, T=8.0)
    zt = solve_zhang(lam, Gs, Gr, ZhangInitial.empty(), p)
    tr = solve(ArrivalRate.constant(lam), Gs, Gr, InitialCondition.empty(DT), p)
    for c in ("Q", "B", "X", "K", "R"):
        assert np.max(np.abs(getattr(zt, c) - getattr(tr, c))) < 2e-3, c
    assert zt.balance_residual() < 1e-10
    assert zt.qqv_residual() < 1e-10


def test_layer_start_matches_elapsed():
    lam, Gs, Gr, a = 1.5, Erlang(2, 2.0), Uniform(0.0, 2.0), 0.5
    p = SolverParams(dt=DT, T=6.0)
    ic = layer_ic(lam, Gr, a, DT)
    zt = solve_zhang(lam, Gs, Gr, ZhangInitial.from_nu0(ic.nu0, Gs, lam * a), p)
    tr = solve(ArrivalRate.constant(lam), Gs, Gr, ic, p)
    assert max(np.max(np.abs(getattr(zt, c) - getattr(tr, c))) for c in ("Q", "B", "X", "K", "R")) < 2e-3
    assert zt.Q[0] == pytest.approx(ic.eta0.total_mass, rel=1e-6)


def test_entry_representation():
    zt = solve_zhang(2.0, Exponential(1.0), Uniform(0.0, 2.0), ZhangInitial.empty(), SolverParams(dt=DT, T=6.0))
    assert np.max(np.abs(zt.entry_representation() - zt.K)) < 1e-3


def test_state_tails_at_zero():
    zt = solve_zhang(2.0, Erlang(2, 2.0), Exponential(0.5), ZhangInitial.empty(), SolverParams(dt=DT, T=4.0))
    j = zt.index(3.0)
    s = zt.state(j)
    assert s.Z_meas(0.0)[0] == pytest.approx(zt.B[j], abs=1e-6)
    assert float(np.atleast_1d(s.R_meas(0.0))[0]) == pytest.approx(zt.Q[j], abs=1e-9)


def test_requires_constant_rate_and_regular_laws():
    p = SolverParams(dt=1e-2, T=1.0)
    with pytest.raises(ConfigError):
        solve_zhang(ArrivalRate.sinusoid(1, 0.5, 1), Exponential(1), Exponential(1), ZhangInitial.empty(), p)
    with pytest.raises(ConfigError):
        solve_zhang(1.0, Deterministic(1.0), Exponential(1), ZhangInitial.empty(), p)


def test_fit_nu0_recovers_tail():
    Gs = Erlang(2, 2.0)
    target = con2_tail(nu_uniform(1e-2), Gs)
    fit = fit_nu0(target, Gs, 1e-2)
    assert fit.nu0 is not None and fit.residual < 1e-6
    xs = np.linspace(0.0, 3.0, 31)
    assert np.max(np.abs(con2_tail(fit.nu0, Gs)(xs) - target(xs))) < 1e-5


def test_exponential_service_needs_exponential_tail():
    Z0 = lambda x: np.clip(1.0 - np.asarray(x) / 2.0, 0.0, None)
    fit = fit_nu0(Z0, Exponential(1.0), 1e-2)
    assert fit.nu0 is None and fit.residual > 1e-2


def test_zhang_to_elapsed_report():
    zt = solve_zhang(1.5, Exponential(1.0), Uniform(0.0, 2.0),
                     ZhangInitial.from_nu0(nu_uniform(DT), Exponential(1.0), 0.75), SolverParams(dt=DT, T=5.0))
    rep = zuniga_from_zhang(zt)
    assert rep.feasible and rep.passed(2e-3)
    assert rep.to_json()["feasible"] is True


def test_elapsed_to_zhang_feasible_layer():
    lam, Gr = 1.5, Uniform(0.0, 2.0)
    tr = solve(ArrivalRate.constant(lam), Exponential(1.0), Gr, layer_ic(lam, Gr, 0.5, DT),
               SolverParams(dt=DT, T=5.0))
    res = zhang_from_zuniga(tr)
    assert res.feasible
    assert res.trajectory.qqv_residual() < 1e-3


def test_elapsed_to_zhang_scaled_layer_infeasible():
    lam, Gr = 1.5, Uniform(0.0, 2.0)
    tr = solve(ArrivalRate.constant(lam), Exponential(1.0), Gr, layer_ic(lam, Gr, 0.5, DT, scale=1.5),
               SolverParams(dt=DT, T=5.0))
    res = zhang_from_zuniga(tr)
    assert not res.feasible
    cert = res.certificate
    assert cert["spread"] >= 10 * cert["tolerance"]
    assert '"z depends on x"' in res.certificate_json()


def test_density_condition_smooth_patience():
    lam, Gr = 1.5, Weibull(2.0, 1.0)
    ok = solve(ArrivalRate.constant(lam), Exponential(1.0), Gr, layer_ic(lam, Gr, 0.5, DT), SolverParams(dt=DT, T=2.0))
    bad = solve(ArrivalRate.constant(lam), Exponential(1.0), Gr, layer_ic(lam, Gr, 0.5, DT, 1.5),
                SolverParams(dt=DT, T=2.0))
    ts = [0.0, 0.1, 0.2]
    good = check_density_condition(ok.ic.eta0, Gr, lam, ok, ts, tol=1e-3)
    worse = check_density_condition(bad.ic.eta0, Gr, lam, bad, ts, tol=1e-3)
    assert good["feasible"] and not worse["feasible"]
