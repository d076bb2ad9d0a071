"""Pharmacokinetic encoders turning sparse impulses into continuous channels.

All channels use the shape-2 gamma activity ``h(t) = t/tau**2 * exp(-t/tau)``
whose cumulative is ``H(t) = 1 - (1 + t/tau) * exp(-t/tau)``. Kernels are
truncated at ``duration_min`` (default ``8*tau``); the mass beyond the cut is
folded into the final step so cumulative values before the cut stay exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import ConfigError
from .physio import MG_PER_G

DEFAULT_IOB_TAU = 75.0
DEFAULT_COB_TAU = 40.0
DEFAULT_F_BIO = 0.9


@dataclass(frozen=True)
class KernelSpec:
    tau_min: float
    family: str = "gamma2"
    duration_min: float | None = None

    def __post_init__(self):
        if self.family != "gamma2":
            raise ConfigError(f"unsupported kernel family {self.family!r}")
        if not self.tau_min > 0:
            raise ConfigError("kernel tau must be positive")
        if self.duration_min is not None and self.duration_min <= 0:
            raise ConfigError("kernel duration must be positive")

    @property
    def support(self):
        return 8.0 * self.tau_min if self.duration_min is None else float(self.duration_min)

    def activity(self, t):
        """Truncated activity density (1/min) at elapsed times ``t``."""
        t = np.asarray(t, dtype=np.float64)
        tau = self.tau_min
        out = np.where((t >= 0) & (t < self.support), t / (tau * tau) * np.exp(-np.maximum(t, 0) / tau), 0.0)
        return out

    def cumulative(self, t):
        """Absorbed fraction ``H``; exactly 1 from the truncation point on."""
        t = np.asarray(t, dtype=np.float64)
        x = np.maximum(t, 0) / self.tau_min
        out = np.where(t < self.support, 1.0 - (1.0 + x) * np.exp(-x), 1.0)
        return np.where(t < 0, 0.0, out)

    def remaining(self, t):
        """On-board fraction ``1 - H``: 1 at the dose time, 0 before it and after the cut."""
        t = np.asarray(t, dtype=np.float64)
        return np.where(t < 0, 0.0, 1.0 - self.cumulative(t))


def discretize_kernel(spec, step_min):
    """Per-step activity mass and its prefix sums.

    ``activity[k]`` is the mass absorbed in ``[k*step, (k+1)*step)``; the
    truncated tail goes into the last bin so the masses sum to exactly 1.
    ``cumulative[k]`` is the fraction absorbed by ``(k+1)*step``.
    """
    if not step_min > 0:
        raise ConfigError("step_min must be positive")
    n = max(1, int(math.ceil(spec.support / step_min - 1e-12)))
    edges = np.arange(n + 1, dtype=np.float64) * step_min
    x = np.minimum(edges, spec.support) / spec.tau_min
    H = 1.0 - (1.0 + x) * np.exp(-x)
    activity = np.diff(H)
    activity[-1] += 1.0 - activity.sum()
    cumulative = np.cumsum(activity)
    cumulative[-1] = 1.0
    return activity, cumulative


def quadrature_cumulative(spec, t):
    """Independent check of ``H(t)`` by adaptive quadrature of the activity."""
    tau = spec.tau_min
    value, _ = integrate.quad(lambda s: s / tau**2 * math.exp(-s / tau), 0.0, t)
    return value


def _times(grid_or_times):
    times = getattr(grid_or_times, "times", grid_or_times)
    return np.asarray(times, dtype=np.float64)


def _superpose(events, kind, times, fn, support):
    # times must be sorted; each event only touches [t_j, t_j + support)
    out = np.zeros(len(times))
    for e in events:
        if e.kind != kind or e.magnitude == 0:
            continue
        lo = np.searchsorted(times, e.t_min, side="left")
        hi = np.searchsorted(times, e.t_min + support, side="left")
        if hi > lo:
            out[lo:hi] += e.magnitude * fn(times[lo:hi] - e.t_min)
    return out


def iob_series(events, spec, grid):
    """Insulin on board (U), ``sum_j u_j * (1 - H(t - t_j))``; boluses only."""
    return _superpose(events, "bolus", _times(grid), spec.remaining, spec.support)


def cob_series(events, spec, grid):
    """Carbs on board (g); meal events only."""
    return _superpose(events, "meal", _times(grid), spec.remaining, spec.support)


def rag_series(events, spec, grid, f_bio=DEFAULT_F_BIO, vg_dl=None):
    """Glucose rate of appearance, g/min (mg/dL/min when ``vg_dl`` is given)."""
    out = f_bio * _superpose(events, "meal", _times(grid), spec.activity, spec.support)
    if vg_dl is not None:
        out = out * MG_PER_G / vg_dl
    return out


@dataclass(frozen=True)
class EncoderSpec:
    iob: KernelSpec = field(default_factory=lambda: KernelSpec(DEFAULT_IOB_TAU))
    cob: KernelSpec = field(default_factory=lambda: KernelSpec(DEFAULT_COB_TAU))
    f_bio: float = DEFAULT_F_BIO
    vg_dl: float | None = None


@dataclass(frozen=True)
class EncodedChannels:
    grid: object
    iob: np.ndarray
    cob: np.ndarray
    rag: np.ndarray

    def __post_init__(self):
        for name in ("iob", "cob", "rag"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if len(arr) != self.grid.n_points:
                raise ValueError(f"{name} length must match the grid")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def channel(self, name):
        return getattr(self, name)


def encode(events, grid, spec=None):
    spec = spec or EncoderSpec()
    return EncodedChannels(
        grid,
        iob_series(events, spec.iob, grid),
        cob_series(events, spec.cob, grid),
        rag_series(events, spec.cob, grid, spec.f_bio, spec.vg_dl),
    )


def encode_episode(episode, spec=None):
    return encode(episode.events, episode.grid, spec)


def per_patient_spec(params, base=None):
    """Encoder kernels re-centred on one patient's simulator time constants."""
    base = base or EncoderSpec()
    return EncoderSpec(
        iob=KernelSpec(params.tau_i1 + params.tau_i2),
        cob=KernelSpec(params.tau_m),
        f_bio=params.f_bio,
        vg_dl=base.vg_dl,
    )
