import numpy as np
import pytest

from oracles import euler_glucose
from driverlens.errors import ConfigError, ValidationError
from driverlens.physio import (
    DEFAULT_BOUNDS,
    CohortSpec,
    Edit,
    Integrator,
    PatientParams,
    SimConfig,
    counterfactual_pair,
    sample_cohort,
    sample_patient,
    simulate,
    trajectory,
)
from driverlens.timeline import DriverEvent

REF = PatientParams()


def test_degenerate_bounds_give_exact_values():
    target = PatientParams.from_sensitivity(SI=3e-4, CR=9.0, Gb=101.0)
    p = sample_patient(CohortSpec.degenerate(target), 0, 1)
    assert p == target


def test_default_cohort_spans():
    draws = sample_cohort(CohortSpec(n_patients=1000), 7)
    si = [p.SI for p in draws]
    cr = [p.CR for p in draws]
    assert max(si) / min(si) >= 10
    lo, hi = DEFAULT_BOUNDS["CR"]
    assert 3 <= max(cr) / min(cr) <= 4 and hi / lo <= 4
    assert all(p.p3 == pytest.approx(p.SI * p.p2, rel=1e-15) for p in draws[:20])


def test_sampling_is_deterministic_per_index():
    spec = CohortSpec()
    assert sample_patient(spec, 3, 9) == sample_patient(spec, 3, 9)
    assert sample_patient(spec, 3, 9) != sample_patient(spec, 4, 9)


def test_narrow_si_bounds_rejected():
    with pytest.raises(ConfigError):
        sample_patient(CohortSpec(bounds={"SI": (1e-4, 2e-4)}), 0, 0)


def test_equilibrium_without_events():
    ep = simulate(REF, [], SimConfig(duration_min=1440, noise=False))
    assert np.max(np.abs(ep.latent_glucose.values - REF.Gb)) < 0.1


def test_bolus_lowers_glucose_against_oracle():
    base = euler_glucose(REF, [], 300)
    bolus = euler_glucose(REF, [DriverEvent(0, "bolus", 1.0)], 300)
    assert np.all(bolus[30:301] < base[30:301])
    _, rk4 = trajectory(REF, [DriverEvent(0, "bolus", 1.0)], 300)
    assert np.all(rk4[30:301, 0] < REF.Gb)


def test_meal_peak_timing_against_oracle():
    g = euler_glucose(REF, [DriverEvent(0, "meal", 50.0)], 240)
    peak = int(np.argmax(g))
    assert g[peak] > REF.Gb and 30 <= peak <= 120
    _, rk4 = trajectory(REF, [DriverEvent(0, "meal", 50.0)], 240)
    assert abs(int(np.argmax(rk4[:, 0])) - peak) <= 2


@pytest.mark.parametrize("params", [REF, PatientParams.from_sensitivity(SI=4e-4, tau_m=50.0, a_circ=0.2,
                                                                         e_gain=1.0)])
def test_rk4_matches_fine_euler(params):
    events = [DriverEvent(0, "meal", 70.0), DriverEvent(15, "bolus", 6.0), DriverEvent(200, "exercise", 0.6, 45)]
    _, rk4 = trajectory(params, events, 400)
    assert np.max(np.abs(rk4[:, 0] - euler_glucose(params, events, 400))) < 0.5


def test_noop_edit_identical():
    cfg = SimConfig(duration_min=600)
    ev = (DriverEvent(60, "meal", 40.0), DriverEvent(60, "bolus", 3.0))
    base, edited = counterfactual_pair(REF, ev, Edit("noop"), cfg)
    assert base.latent_glucose == edited.latent_glucose


def test_added_bolus_lowers_at_two_hours():
    cfg = SimConfig(duration_min=600)
    ev = (DriverEvent(60, "meal", 40.0),)
    base, edited = counterfactual_pair(REF, ev, Edit("add", DriverEvent(100, "bolus", 2.0)), cfg)
    k = (100 + 120) // 5
    assert edited.latent_glucose.values[k] <= base.latent_glucose.values[k]
    oracle_base = euler_glucose(REF, ev, 600)
    oracle_edit = euler_glucose(REF, ev + (DriverEvent(100, "bolus", 2.0),), 600)
    assert oracle_edit[220] <= oracle_base[220]


def test_doubled_meal_raises_at_one_hour():
    cfg = SimConfig(duration_min=600)
    ev = (DriverEvent(100, "meal", 30.0),)
    base, edited = counterfactual_pair(REF, ev, Edit("rescale", index=0, factor=2.0), cfg)
    k = (100 + 60) // 5
    assert edited.latent_glucose.values[k] >= base.latent_glucose.values[k]


def test_edit_of_missing_event_rejected():
    with pytest.raises(ValidationError):
        Edit("remove", index=3).apply([DriverEvent(0, "meal", 1.0)])


def test_branch_is_independent():
    integ = Integrator(REF)
    integ.advance(30, [DriverEvent(0, "meal", 40.0)])
    a, b = integ.branch(), integ.branch()
    a.apply(DriverEvent(30, "bolus", 4.0))
    a.advance(120)
    b.advance(120)
    integ.advance(120)
    assert b.state == integ.state and a.state[0] < b.state[0]


def test_invalid_params_rejected():
    with pytest.raises(ValidationError):
        PatientParams(tau_m=0.0)
    with pytest.raises(ValidationError):
        PatientParams(Gb=300.0)


def test_noise_stream_is_reproducible():
    p = PatientParams(cgm_noise_sd=10.0)
    cfg = SimConfig(duration_min=300, master_seed=3, patient_index=1)
    assert simulate(p, [], cfg).cgm == simulate(p, [], cfg).cgm
