"""Temporal data model: grids, CGM traces, driver events, episodes and windows.

Time is integer minutes from an opaque episode origin. An episode is stored
as ``<stem>.cgm.csv`` (``t_min,glucose_mgdl,quality``) plus
``<stem>.events.jsonl``; synthetic episodes also carry ``<stem>.latent.csv``
with the noise-free glucose in the same CSV layout.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError

GLUCOSE_MIN = 10.0
GLUCOSE_MAX = 800.0
GAP_THRESHOLD_MIN = 30
DEFAULT_STEP_MIN = 5
DEFAULT_CONTEXT = 24

EVENT_KINDS = ("bolus", "meal", "exercise")


class Quality(IntEnum):
    MEASURED = 0
    INTERPOLATED = 1
    MISSING = 2

    @property
    def label(self):
        return self.name.lower()

    @classmethod
    def parse(cls, text):
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown quality flag {text!r}") from None


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TimeGrid:
    start_min: int = 0
    step_min: int = DEFAULT_STEP_MIN
    n_points: int = 1

    def __post_init__(self):
        if self.step_min <= 0:
            raise ValidationError("step_min must be positive", field="step_min")
        if self.n_points < 1:
            raise ValidationError("n_points must be >= 1", field="n_points")

    @property
    def times(self):
        return self.start_min + self.step_min * np.arange(self.n_points, dtype=np.int64)

    @property
    def end_min(self):
        """Exclusive end of the span covered by the grid."""
        return self.start_min + self.step_min * self.n_points

    def contains(self, t_min):
        return self.start_min <= t_min < self.end_min

    def index_at_or_before(self, t_min):
        return (t_min - self.start_min) // self.step_min


@dataclass(frozen=True)
class GlucoseTrace:
    grid: TimeGrid
    values: np.ndarray
    quality: np.ndarray = None

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if self.quality is None:
            quality = np.zeros(len(values), dtype=np.int8)
        else:
            quality = self.quality
        quality = _frozen(quality, np.int8)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "quality", quality)
        if values.ndim != 1 or len(values) != self.grid.n_points:
            raise ValidationError(
                f"values length {len(values)} != grid.n_points {self.grid.n_points}", field="values"
            )
        if len(quality) != len(values):
            raise ValidationError("quality length mismatch", field="quality")
        if not np.all(np.isfinite(values)):
            raise ValidationError("glucose values must be finite", field="values")
        if values.min() < GLUCOSE_MIN or values.max() > GLUCOSE_MAX:
            raise ValidationError(
                f"glucose outside [{GLUCOSE_MIN}, {GLUCOSE_MAX}] mg/dL", field="values"
            )
        if quality.min() < 0 or quality.max() > 2:
            raise ValidationError("unknown quality code", field="quality")

    def __eq__(self, other):
        if not isinstance(other, GlucoseTrace):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.quality, other.quality)
        )

    __hash__ = None

    @property
    def missing(self):
        return self.quality == Quality.MISSING


@dataclass(frozen=True)
class DriverEvent:
    t_min: int
    kind: str
    magnitude: float
    duration_min: int = 0

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValidationError(f"unknown event kind {self.kind!r}", field="kind")
        if isinstance(self.t_min, float):
            if not self.t_min.is_integer():
                raise ValidationError("t_min must be an integer", field="t_min")
            object.__setattr__(self, "t_min", int(self.t_min))
        if not math.isfinite(self.magnitude) or self.magnitude < 0:
            raise ValidationError(
                f"{self.kind} magnitude must be finite and >= 0, got {self.magnitude}", field="magnitude"
            )
        if self.kind == "exercise":
            if self.duration_min <= 0:
                raise ValidationError("exercise needs duration_min > 0", field="duration_min")
            if self.magnitude > 1:
                raise ValidationError("exercise intensity must be in [0, 1]", field="magnitude")
        elif self.duration_min != 0:
            raise ValidationError(f"{self.kind} must have duration_min = 0", field="duration_min")

    def to_json(self):
        return json.dumps(
            {
                "t_min": int(self.t_min),
                "kind": self.kind,
                "magnitude": round(float(self.magnitude), 6),
                "duration_min": int(self.duration_min),
            },
            separators=(",", ":"),
        )

    def shifted(self, delta_min):
        return DriverEvent(self.t_min + delta_min, self.kind, self.magnitude, self.duration_min)


def sort_events(events):
    return tuple(sorted(events, key=lambda e: (e.t_min, EVENT_KINDS.index(e.kind), e.magnitude)))


@dataclass(frozen=True)
class EpisodeRecord:
    patient_id: str
    cgm: GlucoseTrace
    events: tuple = ()
    latent_glucose: GlucoseTrace | None = None

    def __post_init__(self):
        events = tuple(self.events)
        object.__setattr__(self, "events", events)
        times = [e.t_min for e in events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValidationError("events must be sorted by t_min", field="events")
        grid = self.cgm.grid
        for e in events:
            if not grid.contains(e.t_min):
                raise ValidationError(
                    f"event at t={e.t_min} outside grid span [{grid.start_min}, {grid.end_min})",
                    field="events",
                )
        if self.latent_glucose is not None and self.latent_glucose.grid != grid:
            raise ValidationError("latent_glucose must share the CGM grid", field="latent_glucose")

    @property
    def grid(self):
        return self.cgm.grid

    def with_events(self, events):
        return EpisodeRecord(self.patient_id, self.cgm, sort_events(events), self.latent_glucose)

    def slice(self, start_index, stop_index, patient_id=None):
        """Sub-episode covering grid points ``[start_index, stop_index)``."""
        grid = self.grid
        stop_index = min(stop_index, grid.n_points)
        sub_grid = TimeGrid(grid.start_min + start_index * grid.step_min, grid.step_min, stop_index - start_index)

        def cut(trace):
            if trace is None:
                return None
            return GlucoseTrace(sub_grid, trace.values[start_index:stop_index], trace.quality[start_index:stop_index])

        events = tuple(e for e in self.events if sub_grid.contains(e.t_min))
        return EpisodeRecord(patient_id or self.patient_id, cut(self.cgm), events, cut(self.latent_glucose))


@dataclass(frozen=True)
class ForecastWindow:
    episode: EpisodeRecord = field(repr=False, compare=False)
    anchor: int
    context: int
    horizons: tuple

    @property
    def context_slice(self):
        return slice(self.anchor - self.context + 1, self.anchor + 1)


def resample_to_grid(samples, grid, gap_threshold_min=GAP_THRESHOLD_MIN):
    """Linearly interpolate ``(t_min, mg/dL)`` samples onto ``grid``.

    Grid points that coincide with a sample are ``measured``; points inside a
    gap longer than ``gap_threshold_min`` or outside the sampled span are
    ``missing`` (their value is the interpolated or edge value, so the trace
    stays finite); everything else is ``interpolated``.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("no samples")
    t = np.array([s[0] for s in samples], dtype=np.float64)
    v = np.clip(np.array([s[1] for s in samples], dtype=np.float64), GLUCOSE_MIN, GLUCOSE_MAX)
    if np.any(np.diff(t) <= 0):
        raise ValidationError("unsorted")
    gt = grid.times.astype(np.float64)
    values = np.interp(gt, t, v)
    quality = np.full(grid.n_points, Quality.INTERPOLATED, dtype=np.int8)
    pos = np.searchsorted(t, gt)
    exact = (pos < len(t)) & (t[np.minimum(pos, len(t) - 1)] == gt)
    quality[exact] = Quality.MEASURED
    outside = (gt < t[0]) | (gt > t[-1])
    inner = ~exact & ~outside
    right = np.clip(pos, 1, len(t) - 1)
    gaps = t[right] - t[right - 1]
    quality[inner & (gaps > gap_threshold_min)] = Quality.MISSING
    quality[outside] = Quality.MISSING
    return GlucoseTrace(grid, values, quality)


def valid_anchors(episode, context, horizons, stride=1):
    """Anchors ``t`` with a full, gap-free context ``[t-C+1, t]`` and observed targets.

    Anchors lie on the lattice ``C-1 + k*stride``.
    """
    if context < 1 or stride < 1 or not horizons:
        raise ValueError("need context >= 1, stride >= 1 and at least one horizon")
    n = episode.grid.n_points
    max_h = max(horizons)
    first, last = context - 1, n - 1 - max_h
    if last < first:
        return np.zeros(0, dtype=np.int64)
    missing = episode.cgm.missing.astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(missing)])
    anchors = np.arange(first, last + 1, stride, dtype=np.int64)
    ok = (csum[anchors + 1] - csum[anchors + 1 - context]) == 0
    for h in horizons:
        ok &= missing[anchors + h] == 0
    return anchors[ok]


def extract_windows(episode, context, horizons, stride=1):
    horizons = tuple(int(h) for h in horizons)
    return [ForecastWindow(episode, int(t), context, horizons) for t in valid_anchors(episode, context, horizons, stride)]


# ---------------------------------------------------------------- file I/O


def _cgm_csv(trace):
    buf = io.StringIO()
    buf.write("t_min,glucose_mgdl,quality\n")
    for t, v, q in zip(trace.grid.times.tolist(), trace.values.tolist(), trace.quality.tolist()):
        buf.write(f"{t},{v!r},{Quality(q).label}\n")
    return buf.getvalue()


def _events_jsonl(events):
    return "".join(e.to_json() + "\n" for e in events)


def episode_files(episode):
    """Serialized file contents keyed by suffix (deterministic bytes)."""
    files = {".cgm.csv": _cgm_csv(episode.cgm), ".events.jsonl": _events_jsonl(episode.events)}
    if episode.latent_glucose is not None:
        files[".latent.csv"] = _cgm_csv(episode.latent_glucose)
    return files


def episode_hash(episode):
    h = hashlib.sha256(episode.patient_id.encode("utf-8"))
    for suffix, text in sorted(episode_files(episode).items()):
        h.update(suffix.encode("utf-8"))
        h.update(text.encode("utf-8"))
    return h.hexdigest()


def save_episode(episode, path):
    """Write the episode next to ``path`` as ``<stem>.cgm.csv`` etc.

    ``path`` is the stem (any ``.cgm.csv`` suffix is stripped).
    """
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for suffix, text in episode_files(episode).items():
        target = stem.with_name(stem.name + suffix)
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        written.append(target)
    return written


def _stem(path):
    path = Path(path)
    for suffix in (".cgm.csv", ".events.jsonl", ".latent.csv"):
        if path.name.endswith(suffix):
            return path.with_name(path.name[: -len(suffix)])
    return path


def _read_trace(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t_min", "glucose_mgdl", "quality"]:
            raise FormatError(f"bad header {header!r}", line=1)
        times, values, quality = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FormatError(f"expected 3 fields, got {len(row)}", line=lineno)
            try:
                times.append(int(row[0]))
                values.append(float(row[1]))
                quality.append(Quality.parse(row[2]))
            except ValueError as exc:
                raise FormatError(str(exc), line=lineno) from None
    if not times:
        raise FormatError("no rows", line=2)
    step = times[1] - times[0] if len(times) > 1 else DEFAULT_STEP_MIN
    if step <= 0 or any(b - a != step for a, b in zip(times, times[1:])):
        raise FormatError("t_min is not a regular increasing grid", field="t_min")
    grid = TimeGrid(times[0], step, len(times))
    return GlucoseTrace(grid, values, quality)


def _read_events(path):
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                event = DriverEvent(int(obj["t_min"]), obj["kind"], float(obj["magnitude"]), int(obj["duration_min"]))
            except ValidationError as exc:
                raise FormatError(str(exc), line=lineno, field=exc.field) from None
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"malformed event: {exc}", line=lineno) from None
            events.append(event)
    return tuple(events)


def load_episode(path, patient_id=None):
    stem = _stem(path)
    cgm = _read_trace(stem.with_name(stem.name + ".cgm.csv"))
    events_path = stem.with_name(stem.name + ".events.jsonl")
    events = _read_events(events_path) if events_path.exists() else ()
    latent_path = stem.with_name(stem.name + ".latent.csv")
    latent = _read_trace(latent_path) if latent_path.exists() else None
    return EpisodeRecord(patient_id or stem.name, cgm, events, latent)


def events_in(events: Iterable[DriverEvent], kind: str) -> Sequence[DriverEvent]:
    return [e for e in events if e.kind == kind]
