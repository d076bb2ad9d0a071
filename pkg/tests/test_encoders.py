import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gamma2_remaining
from driverlens import encoders as E
from driverlens.errors import ConfigError
from driverlens.physio import PatientParams
from driverlens.timeline import DriverEvent, TimeGrid

GRID = TimeGrid(0, 5, 400)


@pytest.mark.parametrize("tau,step", [(75.0, 5), (40.0, 5), (30.0, 1), (55.0, 7)])
def test_kernel_normalization_and_peak(tau, step):
    activity, cumulative = E.discretize_kernel(E.KernelSpec(tau), step)
    assert activity.sum() == pytest.approx(1.0, abs=1e-12)
    assert cumulative[-1] == 1.0
    peak = int(np.argmax(activity))
    assert abs((peak + 0.5) * step - tau) <= step


def test_cumulative_at_tau_against_quadrature():
    spec = E.KernelSpec(75.0)
    closed = float(spec.cumulative(75.0))
    assert closed == pytest.approx(1 - 2 / math.e, abs=1e-4)
    assert E.quadrature_cumulative(spec, 75.0) == pytest.approx(closed, abs=1e-10)
    _, cum = E.discretize_kernel(spec, 5)
    assert cum[14] == pytest.approx(closed, abs=1e-12)


def test_iob_closed_form():
    spec = E.KernelSpec(75.0)
    iob = E.iob_series([DriverEvent(0, "bolus", 1.0)], spec, np.array([75.0]))
    assert iob[0] == pytest.approx(2 / math.e, abs=1e-4)


def test_no_events_zero():
    spec = E.KernelSpec(50.0)
    for fn in (E.iob_series, E.cob_series, E.rag_series):
        assert not np.any(fn([], spec, GRID))


@settings(max_examples=30, deadline=None)
@given(t1=st.integers(0, 1500), t2=st.integers(0, 1500), u1=st.floats(0.1, 10), u2=st.floats(0.1, 10))
def test_iob_linearity(t1, t2, u1, u2):
    spec = E.KernelSpec(75.0)
    a = E.iob_series([DriverEvent(t1, "bolus", u1)], spec, GRID)
    b = E.iob_series([DriverEvent(t2, "bolus", u2)], spec, GRID)
    both = E.iob_series(sorted([DriverEvent(t1, "bolus", u1), DriverEvent(t2, "bolus", u2)],
                               key=lambda e: e.t_min), spec, GRID)
    np.testing.assert_allclose(both, a + b, rtol=0, atol=1e-12)


def test_cob_starts_full_and_decreases():
    spec = E.KernelSpec(40.0)
    cob = E.cob_series([DriverEvent(0, "meal", 50.0)], spec, GRID)
    assert cob[0] == 50.0
    assert np.all(np.diff(cob) <= 0)
    at_tau = E.cob_series([DriverEvent(0, "meal", 50.0)], spec, np.array([40.0]))[0]
    assert at_tau == pytest.approx(50 * 2 / math.e, abs=5e-3)
    assert cob[-1] == 0.0


def test_rag_integral_and_peak():
    spec = E.KernelSpec(40.0)
    fine = np.arange(0, 8 * 40 + 1, 1.0)
    rag = E.rag_series([DriverEvent(0, "meal", 50.0)], spec, fine, f_bio=0.9)
    assert np.trapezoid(rag, fine) == pytest.approx(45.0, rel=5e-3)
    rag5 = E.rag_series([DriverEvent(0, "meal", 50.0)], spec, GRID, f_bio=0.9)
    assert abs(int(np.argmax(rag5)) * 5 - 40) <= 5


def test_iob_matches_oracle_on_grid():
    spec = E.KernelSpec(75.0)
    ev = [DriverEvent(12, "bolus", 3.0), DriverEvent(300, "bolus", 1.5)]
    t = GRID.times.astype(float)
    expected = 3.0 * gamma2_remaining(t - 12, 75.0) * (t - 12 < 600) + 1.5 * gamma2_remaining(t - 300, 75.0) * (
        t - 300 < 600)
    np.testing.assert_allclose(E.iob_series(ev, spec, GRID), expected, atol=1e-12)


def test_encode_episode_channels():
    enc = E.encode([DriverEvent(0, "meal", 30.0), DriverEvent(0, "bolus", 2.0)], GRID)
    assert set(E.EncodedChannels.__dataclass_fields__) >= {"iob", "cob", "rag"}
    assert enc.channel("iob")[0] == 2.0 and enc.channel("cob")[0] == 30.0


def test_per_patient_spec_uses_absorption():
    spec = E.per_patient_spec(PatientParams(tau_m=55.0, f_bio=0.8))
    assert spec.cob.tau_min == 55.0 and spec.f_bio == 0.8


def test_bad_kernel_rejected():
    with pytest.raises(ConfigError):
        E.KernelSpec(-1.0)
    with pytest.raises(ConfigError):
        E.KernelSpec(10.0, family="exp")
