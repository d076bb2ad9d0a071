"""Logging-fidelity perturbations: time jitter, magnitude noise, dropout, bias."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ConfigError
from .policy import is_correction
from .timeline import DriverEvent, sort_events

DROPOUT_SCOPES = ("snacks", "snacks+corrections", "all")


@dataclass(frozen=True)
class PerturbationConfig:
    jitter_sd_min: float = 0.0
    carb_noise_frac: float = 0.0
    dose_noise_frac: float = 0.0
    dropout_prob: float = 0.0
    snack_grams_threshold: float = 25.0
    dropout_scope: str = "snacks"
    carb_bias_frac: float = 0.0
    seed_tag: str = "fidelity"

    def __post_init__(self):
        for name in ("jitter_sd_min", "carb_noise_frac", "dose_noise_frac", "snack_grams_threshold"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.dropout_prob <= 1:
            raise ConfigError("dropout_prob must be in [0, 1]")
        if self.dropout_scope not in DROPOUT_SCOPES:
            raise ConfigError(f"dropout_scope must be one of {DROPOUT_SCOPES}")
        if self.carb_bias_frac <= -1:
            raise ConfigError("carb_bias_frac must be > -1")

    @property
    def is_identity(self):
        return (
            self.jitter_sd_min == 0
            and self.carb_noise_frac == 0
            and self.dose_noise_frac == 0
            and self.dropout_prob == 0
            and self.carb_bias_frac == 0
        )


PRESETS = {
    "clean": PerturbationConfig(seed_tag="clean"),
    # diary times off by 15-30 min, carb estimates off by 20-40 %
    "paper-C2": PerturbationConfig(
        jitter_sd_min=20.0, carb_noise_frac=0.3, dose_noise_frac=0.1, dropout_prob=0.2, seed_tag="paper-C2"
    ),
    "extreme": PerturbationConfig(
        jitter_sd_min=60.0,
        carb_noise_frac=0.6,
        dose_noise_frac=0.3,
        dropout_prob=0.5,
        snack_grams_threshold=40.0,
        dropout_scope="snacks+corrections",
        carb_bias_frac=-0.2,
        seed_tag="extreme",
    ),
}
PRESET_ORDER = ("clean", "paper-C2", "extreme")


def get_preset(name, **overrides):
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown fidelity preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides) if overrides else base


def lognormal_factor(rng, sd_frac, size=None):
    """Multiplicative noise with mean 1 and standard deviation ``sd_frac``."""
    sigma2 = math.log1p(sd_frac * sd_frac)
    return rng.lognormal(-0.5 * sigma2, math.sqrt(sigma2), size)


def _droppable(event, events, config):
    if config.dropout_scope == "all":
        return True
    if event.kind == "exercise":
        return True
    if event.kind == "meal":
        return event.magnitude < config.snack_grams_threshold
    return config.dropout_scope == "snacks+corrections" and is_correction(event, events)


def degrade_events(events, config, rng, span=None):
    """Return a noisy diary for ``events``; the input is left untouched.

    Draws are made in a fixed order per event so the output depends only on
    (events, config, stream). Jittered times are rounded to whole minutes and
    clipped into the half-open ``span`` when one is given.
    """
    events = list(events)
    if config.is_identity:
        return tuple(events)
    out = []
    for e in events:
        shift = rng.normal(0.0, config.jitter_sd_min) if config.jitter_sd_min > 0 else 0.0
        noise = 1.0
        if e.kind == "meal" and config.carb_noise_frac > 0:
            noise = lognormal_factor(rng, config.carb_noise_frac)
        elif e.kind == "bolus" and config.dose_noise_frac > 0:
            noise = lognormal_factor(rng, config.dose_noise_frac)
        drop = rng.random() < config.dropout_prob if config.dropout_prob > 0 else False
        if drop and _droppable(e, events, config):
            continue
        t = int(round(e.t_min + shift))
        if span is not None:
            t = min(max(t, span[0]), span[1] - 1)
        magnitude = e.magnitude
        if e.kind == "meal":
            magnitude = magnitude * (1.0 + config.carb_bias_frac) * noise
        elif e.kind == "bolus":
            magnitude = magnitude * noise
        out.append(DriverEvent(t, e.kind, round(float(magnitude), 6), e.duration_min))
    return sort_events(out)


def degrade_episode(episode, config, rng):
    """Episode with its event log replaced by a degraded diary (CGM untouched)."""
    if config.is_identity:
        return episode
    grid = episode.grid
    events = degrade_events(episode.events, config, rng, span=(grid.start_min, grid.end_min))
    return episode.with_events(events)
