import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fluidq.distributions import Deterministic, Exponential, Uniform
from fluidq.errors import InvalidMeasureError
from fluidq.measures import GridMeasure, Interval

masses = arrays(float, st.integers(2, 40), elements=st.floats(0.0, 1.0))


def _measure(m, step=0.1):
    return GridMeasure.from_cell_masses(np.arange(m.size + 1) * step, m)


@given(masses, st.floats(0.0, 5.0))
def test_mass_is_additive(m, cut):
    g = _measure(m)
    total = g.mass(Interval(0.0, math.inf))
    left = g.mass(Interval(0.0, cut, True, False))
    right = g.mass(Interval(cut, math.inf))
    assert left + right == pytest.approx(total, abs=1e-12)
    assert total == pytest.approx(g.total_mass, abs=1e-12)


@given(masses, st.floats(0.0, 1.0))
def test_quantile_age_inverts_cumulative(m, frac):
    g = _measure(m)
    if g.total_mass == 0:
        return
    q = frac * g.total_mass
    x = g.quantile_age(q)
    assert g.cumulative(x) >= q - 1e-9


@given(masses)
def test_rebin_conserves_mass(m):
    g = _measure(m)
    new = np.linspace(0.0, g.edges[-1], 7)
    assert g.rebin(new).total_mass == pytest.approx(g.total_mass, abs=1e-12)


@given(masses, st.floats(0.0, 3.0))
def test_age_and_thin_exponential(m, t):
    g = _measure(m)
    law = Exponential(0.7)
    aged = g.age_and_thin(t, law)
    assert aged.total_mass == pytest.approx(g.total_mass * math.exp(-0.7 * t), rel=1e-9, abs=1e-15)


def test_age_and_thin_kills_beyond_support():
    g = GridMeasure.from_cell_masses([0.0, 0.5, 1.0], [1.0, 1.0])
    aged = g.age_and_thin(1.5, Uniform(0.0, 2.0))
    assert aged.total_mass < 0.5


def test_atoms_are_kept():
    g = GridMeasure(np.array([0.0, 1.0, 2.0]), np.zeros(2), np.array([0.5]), np.array([0.3]))
    assert g.mass(Interval.closed(0.5, 0.5)) == pytest.approx(0.3)
    assert g.mass(Interval(0.5, 1.0, False, True)) == 0.0
    aged = g.age_and_thin(0.2, Deterministic(1.0))
    assert aged.total_mass == pytest.approx(0.3)


def test_invalid_measures():
    with pytest.raises(InvalidMeasureError):
        GridMeasure(np.array([0.0, 1.0]), np.array([-1.0]))
    with pytest.raises(InvalidMeasureError):
        GridMeasure(np.array([0.1, 1.0]), np.array([1.0]))
    with pytest.raises(ValueError):
        Interval(2.0, 1.0)


def test_csv_roundtrip(tmp_path):
    g = GridMeasure(np.array([0.0, 0.5, 1.0]), np.array([0.2, 0.4]), np.array([0.25]), np.array([0.1]))
    g.to_csv(tmp_path / "m.csv")
    h = GridMeasure.from_csv(tmp_path / "m.csv")
    assert np.allclose(h.cell_masses, g.cell_masses)
    assert h.atoms == pytest.approx(g.atoms)
