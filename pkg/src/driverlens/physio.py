"""Minimal-model virtual patients.

State ``(G, X, Isc1, Isc2, Q1, Q2)`` evolves as::

    dG/dt    = -(p1 + X*s(t))*G + p1*Gb + Ra(t)/Vg
    dX/dt    = -p2*X + p3*Ip(t)
    dIsc1/dt = u(t) - Isc1/tau_i1
    dIsc2/dt = Isc1/tau_i1 - Isc2/tau_i2,     Ip = Isc2/(tau_i2*Vi)
    dQ1/dt   = d(t) - Q1/tau_m
    dQ2/dt   = Q1/tau_m - Q2/tau_m,           Ra = f_bio*Q2/tau_m
    s(t)     = (1 + a_circ*sin(2*pi*(t - phi_circ)/1440)) * (1 + e_gain*activity(t))

Boluses and meals are impulses into ``Isc1`` and ``Q1``. ``Ip`` is reported in
uU/mL (bolus units are scaled by 1e6 and ``Vi`` is a lumped volume proxy in
mL) and ``Ra`` in mg/min (grams scaled by 1e3), so ``Ra/Vg`` is mg/dL/min.
Integration is classical RK4 at a fixed step.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import ndtr

from . import rng as rngmod
from .errors import ConfigError, SimulationError, ValidationError
from .timeline import (
    DEFAULT_STEP_MIN,
    GLUCOSE_MAX,
    GLUCOSE_MIN,
    DriverEvent,
    EpisodeRecord,
    GlucoseTrace,
    TimeGrid,
    sort_events,
)

MINUTES_PER_DAY = 1440
UU_PER_U = 1e6
MG_PER_G = 1e3


@dataclass(frozen=True)
class PatientParams:
    Gb: float = 120.0
    SI: float = 1.6e-4
    p1: float = 0.01
    p2: float = 0.02
    p3: float = 3.2e-6
    tau_i1: float = 50.0
    tau_i2: float = 50.0
    Vi: float = 600.0
    tau_m: float = 40.0
    f_bio: float = 0.9
    Vg: float = 150.0
    a_circ: float = 0.0
    phi_circ: float = 0.0
    e_gain: float = 0.0
    cgm_noise_sd: float = 0.0
    CR: float = 11.5
    CF: float = 23.0
    target: float = 120.0

    def __post_init__(self):
        for name in ("tau_i1", "tau_i2", "tau_m", "p1", "p2", "Vi", "Vg"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive", field=name)
        if not 70 <= self.Gb <= 180:
            raise ValidationError("Gb must be in [70, 180] mg/dL", field="Gb")
        if not self.SI > 0:
            raise ValidationError("SI must be positive", field="SI")
        if not 0 < self.f_bio <= 1:
            raise ValidationError("f_bio must be in (0, 1]", field="f_bio")
        if not 0 <= self.a_circ <= 0.5:
            raise ValidationError("a_circ must be in [0, 0.5]", field="a_circ")
        if self.e_gain < 0 or self.cgm_noise_sd < 0 or self.p3 < 0:
            raise ValidationError("e_gain, p3 and cgm_noise_sd must be >= 0")
        if self.CR <= 0 or self.CF <= 0:
            raise ValidationError("CR and CF must be positive")

    @classmethod
    def from_sensitivity(cls, **kw):
        """Build params with ``p3 = SI * p2`` (the minimal-model identity)."""
        base = cls()
        SI = kw.get("SI", base.SI)
        p2 = kw.get("p2", base.p2)
        kw.setdefault("p3", SI * p2)
        return replace(base, **kw)


PARAM_NAMES = tuple(f.name for f in fields(PatientParams) if f.name != "p3")

# Log-uniform bounds of the default heterogeneous cohort, calibrated so the
# cohort shows 1-3 corrections a day, mixed-meal absorption peaking at
# 45-75 min and a CGM noise floor near typical sensor error. The reference
# patient above (meal peak ~110 min, bolus nadir ~180 min) is used by the
# single-run checks. These are choices of this package, not clinical estimates.
DEFAULT_BOUNDS = {
    "Gb": (95.0, 150.0),
    "SI": (0.45e-4, 5e-4),
    "p1": (0.008, 0.014),
    "p2": (0.018, 0.032),
    "tau_i1": (40.0, 62.0),
    "tau_i2": (40.0, 62.0),
    "Vi": (500.0, 700.0),
    "tau_m": (45.0, 75.0),
    "f_bio": (0.8, 0.95),
    "Vg": (130.0, 170.0),
    "a_circ": (0.05, 0.3),
    "phi_circ": (60.0, 1380.0),
    "e_gain": (0.5, 1.5),
    "cgm_noise_sd": (10.0, 18.0),
    "CR": (6.0, 22.0),
    "CF": (12.0, 45.0),
    "target": (110.0, 125.0),
}

# Parameters drawn through a Gaussian copula together with SI: patients who
# are more insulin-sensitive tend to run larger carb ratios and correction
# factors. Marginals stay exactly log-uniform.
COUPLED_TO_SI = ("CR", "CF")
DEFAULT_COUPLING = 0.9


@dataclass(frozen=True)
class CohortSpec:
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    n_patients: int = 20
    days: int = 14
    seed: int = 42
    coupling: float = DEFAULT_COUPLING
    min_si_span: float = 10.0

    def __post_init__(self):
        merged = dict(DEFAULT_BOUNDS)
        merged.update({k: tuple(float(x) for x in v) for k, v in self.bounds.items()})
        object.__setattr__(self, "bounds", merged)
        for name, (lo, hi) in merged.items():
            if name not in PARAM_NAMES:
                raise ConfigError(f"unknown cohort parameter {name!r}")
            if lo > hi:
                raise ConfigError(f"bounds for {name} are inverted ({lo} > {hi})")
            if lo <= 0 and name not in ("phi_circ", "a_circ", "e_gain", "cgm_noise_sd"):
                raise ConfigError(f"bounds for {name} must be positive for log-uniform sampling")
        if self.n_patients < 1 or self.days < 1:
            raise ConfigError("n_patients and days must be >= 1")
        if not -1 < self.coupling < 1:
            raise ConfigError("coupling must be in (-1, 1)")

    @property
    def homogeneous(self):
        return all(lo == hi for lo, hi in self.bounds.values())

    def check_heterogeneity(self):
        lo, hi = self.bounds["SI"]
        if lo != hi and hi / lo < self.min_si_span * (1 - 1e-9):
            raise ConfigError(f"SI bounds span {hi / lo:.2f}x < required {self.min_si_span}x")

    @classmethod
    def degenerate(cls, params=None, **kw):
        """Cohort where every patient is ``params`` (default centers)."""
        params = params or PatientParams.from_sensitivity()
        bounds = {name: (getattr(params, name), getattr(params, name)) for name in PARAM_NAMES}
        return cls(bounds=bounds, **kw)


def _draw(lo, hi, u):
    if lo == hi:
        return lo
    if lo > 0:
        return math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
    return lo + u * (hi - lo)


def sample_patient(cohort_spec, patient_index, master_seed=None):
    """Draw one virtual patient, deterministic in (spec, index, seed)."""
    cohort_spec.check_heterogeneity()
    seed = cohort_spec.seed if master_seed is None else master_seed
    gen = rngmod.stream(seed, patient_index, "patient-params")
    z = gen.standard_normal(len(PARAM_NAMES))
    z = dict(zip(PARAM_NAMES, z))
    rho = cohort_spec.coupling
    for name in COUPLED_TO_SI:
        z[name] = rho * z["SI"] + math.sqrt(1 - rho * rho) * z[name]
    values = {}
    for name in PARAM_NAMES:
        lo, hi = cohort_spec.bounds[name]
        values[name] = _draw(lo, hi, float(ndtr(z[name])))
    return PatientParams.from_sensitivity(**values)


def sample_cohort(cohort_spec, master_seed=None):
    return [sample_patient(cohort_spec, i, master_seed) for i in range(cohort_spec.n_patients)]


@dataclass(frozen=True)
class SimConfig:
    duration_min: int = MINUTES_PER_DAY
    ode_step_min: float = 1.0
    master_seed: int = 0
    patient_index: int = 0
    grid_step_min: int = DEFAULT_STEP_MIN
    noise: bool = True

    def __post_init__(self):
        if self.duration_min <= 0:
            raise ConfigError("duration_min must be positive")
        if self.ode_step_min <= 0:
            raise ConfigError("ode_step_min must be positive")
        per_minute = 1.0 / self.ode_step_min
        if self.ode_step_min > 1 or abs(per_minute - round(per_minute)) > 1e-9:
            raise ConfigError("ode_step_min must divide one minute (events fall on whole minutes)")
        if self.duration_min % self.grid_step_min:
            raise ConfigError("duration_min must be a multiple of the grid step")

    @property
    def grid(self):
        return TimeGrid(0, self.grid_step_min, self.duration_min // self.grid_step_min)


class Integrator:
    """Resumable fixed-step RK4 integrator for one patient.

    Events are applied as state jumps at their (integer-minute) times, so the
    integrator can be advanced in segments by a closed-loop policy.
    """

    def __init__(self, params, ode_step_min=1.0, t0=0.0, state=None):
        self.params = params
        self.h = float(ode_step_min)
        self.t = float(t0)
        self.state = tuple(state) if state is not None else (params.Gb, 0.0, 0.0, 0.0, 0.0, 0.0)
        self._activity = []  # (start, end, intensity)
        p = params
        self._c = (
            p.p1, p.p1 * p.Gb, p.p2, p.p3, 1.0 / p.tau_i1, 1.0 / p.tau_i2,
            UU_PER_U / (p.tau_i2 * p.Vi), 1.0 / p.tau_m, p.f_bio * MG_PER_G / (p.tau_m * p.Vg),
        )

    def apply(self, event):
        G, X, I1, I2, Q1, Q2 = self.state
        if event.kind == "bolus":
            I1 += event.magnitude
        elif event.kind == "meal":
            Q1 += event.magnitude
        else:
            self._activity.append((event.t_min, event.t_min + event.duration_min, event.magnitude))
        self.state = (G, X, I1, I2, Q1, Q2)

    def branch(self):
        """Independent copy sharing the current time and state."""
        other = copy.copy(self)
        other._activity = list(self._activity)
        return other

    def activity(self, t):
        return sum(a for start, end, a in self._activity if start <= t < end)

    def circadian(self, t):
        p = self.params
        return 1.0 + p.a_circ * math.sin(2.0 * math.pi * (t - p.phi_circ) / MINUTES_PER_DAY)

    def rate_of_appearance(self, state=None):
        """Glucose appearance in g/min for the current (or given) state."""
        Q2 = (state or self.state)[5]
        return self.params.f_bio * Q2 / self.params.tau_m

    def step(self):
        p1, p1Gb, p2, p3, ki1, ki2, kip, km, kra = self._c
        h = self.h
        t = self.t
        ex = 1.0 + self.params.e_gain * self.activity(t) if self._activity else 1.0
        s0 = self.circadian(t) * ex
        s1 = self.circadian(t + 0.5 * h) * ex
        s2 = self.circadian(t + h) * ex
        G, X, I1, I2, Q1, Q2 = self.state

        def rhs(G, X, I1, I2, Q1, Q2, s):
            return (
                -(p1 + X * s) * G + p1Gb + kra * Q2,
                -p2 * X + p3 * kip * I2,
                -ki1 * I1,
                ki1 * I1 - ki2 * I2,
                -km * Q1,
                km * (Q1 - Q2),
            )

        a = rhs(G, X, I1, I2, Q1, Q2, s0)
        hh = 0.5 * h
        b = rhs(G + hh * a[0], X + hh * a[1], I1 + hh * a[2], I2 + hh * a[3], Q1 + hh * a[4], Q2 + hh * a[5], s1)
        c = rhs(G + hh * b[0], X + hh * b[1], I1 + hh * b[2], I2 + hh * b[3], Q1 + hh * b[4], Q2 + hh * b[5], s1)
        d = rhs(G + h * c[0], X + h * c[1], I1 + h * c[2], I2 + h * c[3], Q1 + h * c[4], Q2 + h * c[5], s2)
        h6 = h / 6.0
        self.state = (
            G + h6 * (a[0] + 2 * b[0] + 2 * c[0] + d[0]),
            X + h6 * (a[1] + 2 * b[1] + 2 * c[1] + d[1]),
            I1 + h6 * (a[2] + 2 * b[2] + 2 * c[2] + d[2]),
            I2 + h6 * (a[3] + 2 * b[3] + 2 * c[3] + d[3]),
            Q1 + h6 * (a[4] + 2 * b[4] + 2 * c[4] + d[4]),
            Q2 + h6 * (a[5] + 2 * b[5] + 2 * c[5] + d[5]),
        )
        self.t = t + h
        if not math.isfinite(self.state[0]) or not math.isfinite(self.state[1]):
            raise SimulationError(f"diverged at t={self.t:g} min")

    def advance(self, t_end, events=(), record=None):
        """Integrate to ``t_end`` applying ``events`` (sorted, in ``[t, t_end)``).

        ``record`` may be a list receiving ``(t, state)`` after every step.
        """
        pending = list(events)
        i = 0
        eps = 1e-9
        while self.t < t_end - eps:
            while i < len(pending) and pending[i].t_min <= self.t + eps:
                self.apply(pending[i])
                i += 1
            self.step()
            if record is not None:
                record.append((self.t, self.state))
        while i < len(pending) and pending[i].t_min <= self.t + eps:
            self.apply(pending[i])
            i += 1


def cgm_noise(sim_config, params, n_points):
    if not sim_config.noise or params.cgm_noise_sd == 0:
        return np.zeros(n_points)
    gen = rngmod.stream(sim_config.master_seed, sim_config.patient_index, "cgm-noise")
    return params.cgm_noise_sd * gen.standard_normal(n_points)


def _clamp(values):
    return np.clip(values, GLUCOSE_MIN, GLUCOSE_MAX)


def run_latent(params, events, sim_config, on_sample=None):
    """Latent glucose at every grid point.

    ``on_sample(k, latent_value)`` is called after each grid point is reached
    and may return extra events (at the current time) to inject; this is how
    the closed-loop behavior policy replays corrections.
    """
    grid = sim_config.grid
    events = list(sort_events(events))
    integ = Integrator(params, sim_config.ode_step_min)
    latent = np.empty(grid.n_points)
    injected = []
    j = 0
    for k, t in enumerate(grid.times.tolist()):
        seg = []
        while j < len(events) and events[j].t_min < t:
            seg.append(events[j])
            j += 1
        integ.advance(t, seg)
        latent[k] = integ.state[0]
        if on_sample is not None:
            extra = on_sample(k, latent[k]) or ()
            for e in extra:
                integ.apply(e)
                injected.append(e)
    integ.advance(sim_config.duration_min, events[j:])
    return latent, injected


def make_episode(patient_id, params, events, latent, sim_config):
    grid = sim_config.grid
    noise = cgm_noise(sim_config, params, grid.n_points)
    cgm = GlucoseTrace(grid, _clamp(latent + noise))
    return EpisodeRecord(patient_id, cgm, sort_events(events), GlucoseTrace(grid, _clamp(latent)))


def simulate(params, events, sim_config, patient_id=None):
    """Simulate one episode; ``latent_glucose`` holds the noise-free trace."""
    grid = sim_config.grid
    for e in events:
        if not grid.contains(e.t_min):
            raise ValidationError(f"event at t={e.t_min} outside simulated duration", field="events")
    latent, _ = run_latent(params, events, sim_config)
    pid = patient_id or f"p{sim_config.patient_index:03d}"
    return make_episode(pid, params, events, latent, sim_config)


def trajectory(params, events, duration_min, ode_step_min=1.0):
    """Full state trajectory ``(t, states)`` at every ODE step, for diagnostics."""
    integ = Integrator(params, ode_step_min)
    ev = sort_events(events)
    head = [e for e in ev if e.t_min <= 0]
    for e in head:
        integ.apply(e)
    record = [(0.0, integ.state)]
    integ.advance(duration_min, [e for e in ev if e.t_min > 0], record=record)
    t = np.array([r[0] for r in record])
    states = np.array([r[1] for r in record])
    return t, states


# ------------------------------------------------------------ counterfactuals


@dataclass(frozen=True)
class Edit:
    """A single-event edit: ``add`` an event, ``remove`` or ``rescale`` one by index."""

    op: str
    event: DriverEvent | None = None
    index: int | None = None
    factor: float = 1.0

    def __post_init__(self):
        if self.op not in ("add", "remove", "rescale", "noop"):
            raise ValidationError(f"unknown edit op {self.op!r}", field="op")
        if self.op == "add" and self.event is None:
            raise ValidationError("add edit needs an event", field="event")
        if self.op in ("remove", "rescale") and self.index is None:
            raise ValidationError(f"{self.op} edit needs an event index", field="index")
        if self.factor < 0:
            raise ValidationError("rescale factor must be >= 0", field="factor")

    def apply(self, events):
        events = list(sort_events(events))
        if self.op == "noop":
            return tuple(events)
        if self.op == "add":
            return sort_events(events + [self.event])
        if not 0 <= self.index < len(events):
            raise ValidationError(f"edit references nonexistent event {self.index}", field="index")
        if self.op == "remove":
            del events[self.index]
        else:
            e = events[self.index]
            events[self.index] = DriverEvent(e.t_min, e.kind, e.magnitude * self.factor, e.duration_min)
        return tuple(events)


def counterfactual_pair(params, base_events, edit, sim_config):
    """Noise-free base and edited runs sharing integrator and seed."""
    cfg = replace(sim_config, noise=False)
    edited_events = edit.apply(base_events)
    base = simulate(params, base_events, cfg)
    edited = simulate(params, edited_events, cfg)
    return base, edited


def params_dict(params):
    return asdict(params)
