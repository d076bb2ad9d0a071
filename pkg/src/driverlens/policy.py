"""Behavior policy: habitual meals, carb-ratio boluses and reactive corrections.

Corrections depend on the glucose the patient sees, so schedule generation and
simulation interleave: the day is integrated one CGM sample at a time and the
policy may inject a correction bolus before integration resumes.
"""
from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np

from .errors import ConfigError
from .physio import MINUTES_PER_DAY, SimConfig, cgm_noise, make_episode, run_latent
from .timeline import DriverEvent, sort_events


@dataclass(frozen=True)
class PolicySpec:
    meal_times_min: tuple = (420, 750, 1110)
    meal_time_jitter_sd: float = 30.0
    meal_grams_mean: tuple = (45.0, 65.0, 70.0)
    meal_grams_sd: tuple = (12.0, 18.0, 20.0)
    snack_prob: float = 0.5
    snack_grams_mean: float = 18.0
    snack_grams_sd: float = 6.0
    correction_threshold: float = 180.0
    correction_cooldown_min: int = 120
    bolus_timing_offset_mean: float = 0.0
    carb_estimate_sd_frac: float = 0.3
    bolus_timing_offset_sd: float = 10.0
    exercise_prob: float = 0.3
    exercise_duration_min: tuple = (30, 60)
    exercise_intensity: tuple = (0.3, 0.8)
    policy_seed_tag: str = "policy"

    def __post_init__(self):
        for name in ("snack_prob", "exercise_prob"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        n = len(self.meal_times_min)
        for name in ("meal_grams_mean", "meal_grams_sd"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} needs one entry per meal time")
        if self.correction_threshold <= 70:
            raise ConfigError("correction_threshold must exceed the basal range")
        if min(self.meal_time_jitter_sd, self.bolus_timing_offset_sd, self.correction_cooldown_min) < 0:
            raise ConfigError("jitter, offsets and cooldown must be >= 0")


def lognormal_factor(rng, sd_frac):
    """Multiplicative error with mean 1 and standard deviation ``sd_frac``."""
    sigma2 = math.log1p(sd_frac * sd_frac)
    return float(rng.lognormal(-0.5 * sigma2, math.sqrt(sigma2)))


def meal_bolus(grams, carb_ratio):
    return grams / carb_ratio


def correction_bolus(glucose, target, correction_factor):
    return max(glucose - target, 0.0) / correction_factor


def _q(x):
    return round(float(x), 6)


def plan_events(params, spec, days, rng):
    """Open-loop part of the schedule: meals, their boluses, and exercise."""
    if days < 1:
        raise ConfigError("days must be >= 1")
    horizon = days * MINUTES_PER_DAY
    events = []

    def clip_t(t):
        return int(min(max(round(t), 0), horizon - 1))

    def add_meal(t, grams):
        t = clip_t(t)
        grams = _q(max(grams, 5.0))
        events.append(DriverEvent(t, "meal", grams))
        offset = spec.bolus_timing_offset_mean
        if spec.bolus_timing_offset_sd > 0:
            offset += rng.normal(0.0, spec.bolus_timing_offset_sd)
        estimate = grams
        if spec.carb_estimate_sd_frac > 0:
            estimate = grams * lognormal_factor(rng, spec.carb_estimate_sd_frac)
        events.append(DriverEvent(clip_t(t + offset), "bolus", _q(meal_bolus(estimate, params.CR))))

    for day in range(days):
        base = day * MINUTES_PER_DAY
        for t0, mu, sd in zip(spec.meal_times_min, spec.meal_grams_mean, spec.meal_grams_sd):
            jitter = rng.normal(0.0, spec.meal_time_jitter_sd) if spec.meal_time_jitter_sd > 0 else 0.0
            grams = rng.normal(mu, sd) if sd > 0 else mu
            add_meal(base + t0 + jitter, grams)
        if spec.snack_prob > 0 and rng.random() < spec.snack_prob:
            t = base + rng.uniform(14 * 60, 22 * 60)
            add_meal(t, rng.normal(spec.snack_grams_mean, spec.snack_grams_sd))
        if spec.exercise_prob > 0 and rng.random() < spec.exercise_prob:
            t = clip_t(base + rng.uniform(16 * 60, 19 * 60))
            lo, hi = spec.exercise_duration_min
            dur = int(rng.integers(lo, hi + 1))
            dur = max(1, min(dur, horizon - t))
            intensity = _q(rng.uniform(*spec.exercise_intensity))
            events.append(DriverEvent(t, "exercise", intensity, dur))
    return list(sort_events(events))


class _CorrectionPolicy:
    def __init__(self, params, spec, grid, noise, planned):
        self.params = params
        self.spec = spec
        self.times = grid.times.tolist()
        self.noise = noise
        self.bolus_times = sorted(e.t_min for e in planned if e.kind == "bolus")
        self.last_correction = None

    def last_bolus_before(self, t):
        i = np.searchsorted(self.bolus_times, t, side="right")
        return self.bolus_times[i - 1] if i else None

    def __call__(self, k, latent):
        t = self.times[k]
        seen = latent + self.noise[k]
        if seen <= self.spec.correction_threshold:
            return ()
        cool = self.spec.correction_cooldown_min
        last = self.last_bolus_before(t)
        if last is not None and t - last < cool:
            return ()
        dose = _q(correction_bolus(seen, self.params.target, self.params.CF))
        if dose <= 0:
            return ()
        self.bolus_times.insert(np.searchsorted(self.bolus_times, t, side="right"), t)
        self.last_correction = t
        return (DriverEvent(t, "bolus", dose),)


def simulate_with_policy(params, spec, days, rng, sim_config=None, patient_id=None):
    """Closed-loop episode: planned events plus corrections fired on CGM readings."""
    planned = plan_events(params, spec, days, rng)
    cfg = sim_config or SimConfig(duration_min=days * MINUTES_PER_DAY)
    if cfg.duration_min != days * MINUTES_PER_DAY:
        raise ConfigError("sim_config duration must equal days * 1440")
    grid = cfg.grid
    noise = cgm_noise(cfg, params, grid.n_points)
    policy = _CorrectionPolicy(params, spec, grid, noise, planned)
    latent, corrections = run_latent(params, planned, cfg, on_sample=policy)
    pid = patient_id or f"p{cfg.patient_index:03d}"
    return make_episode(pid, params, list(planned) + list(corrections), latent, cfg)


def generate_schedule(params, spec, days, rng, sim_config=None):
    """Full event schedule including closed-loop correction boluses."""
    return simulate_with_policy(params, spec, days, rng, sim_config).events


def is_correction(event, events, window_min=60):
    """Heuristic: a bolus with no meal within ``window_min`` minutes."""
    if event.kind != "bolus":
        return False
    return not any(e.kind == "meal" and abs(e.t_min - event.t_min) <= window_min for e in events)
