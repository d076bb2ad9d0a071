"""Causal probes: dose monotonicity, treatment ranking against simulator ground truth.

An intervention pair takes an observed window and adds one event at the
anchor time, at two magnitudes (``lo`` may be zero, meaning no event). The
ground-truth ordering comes from noise-free simulation of the patient's true
events plus the edit; models are probed by re-encoding the edited diary
through their own input channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import encoders
from . import forecasters as fc
from . import rng as rngmod
from .errors import ConfigError, ValidationError
from .physio import Integrator
from .timeline import DEFAULT_STEP_MIN, DriverEvent

SCENARIOS = {"insulin": "bolus", "carbs": "meal"}
DEFAULT_TOLERANCE = 0.5


@dataclass(frozen=True)
class ProbeSpec:
    dose_grid: tuple = (0.0, 2.0, 4.0)
    carb_grid: tuple = (0.0, 20.0, 40.0)
    insulin_horizon_min: int = 120
    carb_horizon_min: int = 60
    tolerance: float = DEFAULT_TOLERANCE
    anchors_per_patient: int = 15
    warmup_min: int = 360
    margin: float = 1.0

    def __post_init__(self):
        for name in ("dose_grid", "carb_grid"):
            grid = tuple(float(x) for x in getattr(self, name))
            if len(grid) < 2 or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
                raise ConfigError(f"{name} must be strictly increasing, non-negative, length >= 2")
            object.__setattr__(self, name, grid)
        if self.anchors_per_patient < 1 or self.warmup_min < 0:
            raise ConfigError("anchors_per_patient must be >= 1 and warmup_min >= 0")

    def grid(self, scenario):
        return self.dose_grid if scenario == "insulin" else self.carb_grid

    def horizon(self, scenario):
        return self.insulin_horizon_min if scenario == "insulin" else self.carb_horizon_min


def edit_event(scenario, t_min, magnitude):
    if magnitude == 0:
        return None
    return DriverEvent(int(t_min), SCENARIOS[scenario], float(magnitude))


@dataclass(frozen=True)
class InterventionPair:
    patient_index: int
    patient_id: str
    scenario: str
    anchor: int
    lo: float
    hi: float
    probe_horizon_min: int
    truth_lo: float
    truth_hi: float
    episode: object = field(repr=False, compare=False, default=None)
    params: object = field(repr=False, compare=False, default=None)
    true_events: tuple = field(repr=False, compare=False, default=())

    @property
    def anchor_min(self):
        return self.episode.grid.start_min + self.anchor * self.episode.grid.step_min

    @property
    def sign(self):
        return 1.0 if self.truth_hi > self.truth_lo else -1.0

    def to_json(self):
        return {
            "patient_id": self.patient_id,
            "scenario": self.scenario,
            "anchor_min": int(self.anchor_min),
            "lo": self.lo,
            "hi": self.hi,
            "probe_horizon_min": self.probe_horizon_min,
            "truth_lo": round(self.truth_lo, 6),
            "truth_hi": round(self.truth_hi, 6),
            "sign": int(self.sign),
        }


def simulate_edits(params, true_events, anchor_min, horizon_min, scenario, magnitudes, warmup_min=360):
    """Noise-free glucose at ``anchor + horizon`` for each edit magnitude.

    Integration starts at basal equilibrium ``warmup_min`` before the anchor
    and replays the true events up to the probe time; the shared prefix is
    integrated once and branched.
    """
    start = anchor_min - warmup_min
    end = anchor_min + horizon_min
    events = [e for e in true_events if start <= e.t_min < end]
    integ = Integrator(params, 1.0, t0=float(start))
    integ.advance(anchor_min, [e for e in events if e.t_min < anchor_min])
    later = [e for e in events if e.t_min >= anchor_min]
    out = []
    for m in magnitudes:
        branch = integ.branch()
        extra = edit_event(scenario, anchor_min, m)
        seq = sorted(later + ([extra] if extra else []), key=lambda e: e.t_min)
        branch.advance(end, seq)
        out.append(branch.state[0])
    return out


def generate_pairs(episodes, true_events, params, spec=None, seed=0, context=24, scenarios=("insulin", "carbs"),
                   min_gap=1e-6, patient_indices=None):
    """Intervention pairs over adjacent grid magnitudes, anchors drawn per patient.

    ``episodes`` are what the model sees (possibly degraded diaries);
    ``true_events`` and ``params`` drive the ground truth. Pairs whose true
    outcomes tie within ``min_gap`` mg/dL are excluded. ``patient_indices``
    overrides the positional stream index, so a cohort can be processed in
    chunks with the same result.
    """
    spec = spec or ProbeSpec()
    episodes = list(episodes)
    indices = range(len(episodes)) if patient_indices is None else patient_indices
    pairs = []
    for i, ep, ev, p in zip(indices, episodes, true_events, params):
        grid = ep.grid
        longest = max(spec.horizon(s) for s in scenarios)
        first = max(context - 1, int(math.ceil(spec.warmup_min / grid.step_min)))
        last = grid.n_points - 1 - longest // grid.step_min
        if last < first:
            continue
        gen = rngmod.stream(seed, i, "probe-anchors")
        k = min(spec.anchors_per_patient, last - first + 1)
        anchors = np.sort(gen.choice(np.arange(first, last + 1), size=k, replace=False))
        for a in anchors.tolist():
            t = grid.start_min + a * grid.step_min
            for scenario in scenarios:
                mags = spec.grid(scenario)
                truth = simulate_edits(p, ev, t, spec.horizon(scenario), scenario, mags, spec.warmup_min)
                for j in range(len(mags) - 1):
                    lo, hi = truth[j], truth[j + 1]
                    if abs(hi - lo) < min_gap:
                        continue
                    pairs.append(InterventionPair(i, ep.patient_id, scenario, a, mags[j], mags[j + 1],
                                                  spec.horizon(scenario), lo, hi, ep, p, tuple(ev)))
    return pairs


# -------------------------------------------------------------- predictors


def _support_points(encoder_spec, step):
    spec = encoder_spec or encoders.EncoderSpec()
    return int(math.ceil(max(spec.iob.support, spec.cob.support) / step)) + 1


def edited_rows(input_spec, episode, anchor, scenario, magnitudes, encoder_spec=None):
    """Feature rows at ``anchor`` with one extra event of each magnitude."""
    grid = episode.grid
    start = max(0, anchor - input_spec.context + 1 - _support_points(encoder_spec, grid.step_min))
    local = episode.slice(start, anchor + 1)
    t = grid.start_min + anchor * grid.step_min
    needs_enc = bool(set(input_spec.channels) & set(fc.ENCODED_CHANNELS))
    eps, encs = [], []
    for m in magnitudes:
        extra = edit_event(scenario, t, m)
        ep = local.with_events(list(local.events) + [extra]) if extra else local
        eps.append(ep)
        encs.append(encoders.encode_episode(ep, encoder_spec) if needs_enc else None)
    anchors = [np.array([anchor - start])] * len(eps)
    return fc.design_matrix(eps, anchors, input_spec, (), encs if needs_enc else None)


class ModelPredictor:
    """Runs a trained model on re-encoded edited windows."""

    def __init__(self, model, encoder_spec=None, step_min=DEFAULT_STEP_MIN):
        self.model = model
        self.encoder_spec = encoder_spec
        self.step_min = step_min

    def head(self, horizon_min):
        if horizon_min < self.step_min:
            raise ValidationError("probe horizon shorter than one grid step")
        pts = int(horizon_min) // self.step_min
        try:
            return list(self.model.horizons).index(pts)
        except ValueError:
            raise ValidationError(f"model has no {horizon_min}-min head") from None

    def predict(self, episode, anchor, scenario, magnitudes, horizon_min):
        h = self.head(horizon_min)
        dm = edited_rows(self.model.input_spec, episode, anchor, scenario, magnitudes, self.encoder_spec)
        return fc.predict(self.model, dm.X, patients=dm.patients)[:, h]

    def predict_pair(self, pair):
        lo, hi = self.predict(pair.episode, pair.anchor, pair.scenario, (pair.lo, pair.hi), pair.probe_horizon_min)
        return float(lo), float(hi)


class SimulatorPredictor:
    """The simulator itself, re-run on the pair's true events (an oracle)."""

    def __init__(self, warmup_min=360, flip=False):
        self.warmup_min = warmup_min
        self.flip = flip

    def predict_pair(self, pair):
        lo, hi = simulate_edits(pair.params, pair.true_events, pair.anchor_min, pair.probe_horizon_min,
                                pair.scenario, (pair.lo, pair.hi), self.warmup_min)
        return (-lo, -hi) if self.flip else (lo, hi)


class RandomPredictor:
    def __init__(self, seed=0):
        self.gen = rngmod.stream(seed, 0, "random-predictor")

    def predict_pair(self, pair):
        lo, hi = self.gen.normal(120.0, 30.0, 2)
        return float(lo), float(hi)


def _as_predictor(obj, encoder_spec=None):
    if isinstance(obj, fc.TrainedModel):
        return ModelPredictor(obj, encoder_spec)
    if not hasattr(obj, "predict_pair"):
        raise ValidationError("predictor must be a TrainedModel or provide predict_pair")
    return obj


def pair_predictions(predictor, pairs, encoder_spec=None):
    predictor = _as_predictor(predictor, encoder_spec)
    out = np.array([predictor.predict_pair(p) for p in pairs], dtype=np.float64).reshape(len(pairs), 2)
    return out[:, 0], out[:, 1]


# ------------------------------------------------------------------ metrics


def ordering_errors(pred_lo, pred_hi, sign):
    """Per-pair error: 1 if the predicted order contradicts truth, 0.5 on a tie."""
    gap = np.asarray(pred_hi, dtype=np.float64) - np.asarray(pred_lo, dtype=np.float64)
    signed = np.asarray(sign, dtype=np.float64) * gap
    return np.where(signed < 0, 1.0, np.where(signed == 0, 0.5, 0.0))


def treatment_ranking_error(predictor, pairs, encoder_spec=None):
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no intervention pairs to rank")
    lo, hi = pair_predictions(predictor, pairs, encoder_spec)
    return float(ordering_errors(lo, hi, [p.sign for p in pairs]).mean())


def ranking_penalty(pred_lo, pred_hi, sign, margin=1.0):
    """Hinge ``mean(max(0, margin - sign * (pred_hi - pred_lo)))``."""
    gap = np.asarray(pred_hi, dtype=np.float64) - np.asarray(pred_lo, dtype=np.float64)
    if gap.size == 0:
        return 0.0
    return float(np.mean(np.maximum(0.0, margin - np.asarray(sign, dtype=np.float64) * gap)))


@dataclass(frozen=True)
class MonotonicityResult:
    violation_rate: float
    violations: int
    comparisons: int
    total_sensitivity: float
    insensitive: bool


def dose_monotonicity_check(model, windows, dose_grid=(0.0, 2.0, 4.0), probe_horizon_min=120,
                            tolerance=DEFAULT_TOLERANCE, encoder_spec=None):
    """Share of adjacent dose steps whose prediction rises by more than ``tolerance``.

    ``windows`` holds ``ForecastWindow`` objects (or ``(episode, anchor)``
    tuples). The result is flagged insensitive when predictions never
    change with dose.
    """
    dose_grid = tuple(float(d) for d in dose_grid)
    if any(b <= a for a, b in zip(dose_grid, dose_grid[1:])):
        raise ConfigError("dose grid must be strictly increasing")
    predictor = ModelPredictor(model, encoder_spec)
    predictor.head(probe_horizon_min)
    violations = comparisons = 0
    sensitivity = 0.0
    for w in windows:
        ep, anchor = (w.episode, w.anchor) if hasattr(w, "episode") else w
        preds = predictor.predict(ep, anchor, "insulin", dose_grid, probe_horizon_min)
        steps = np.diff(preds)
        violations += int(np.sum(steps > tolerance))
        comparisons += len(steps)
        sensitivity += float(np.sum(np.abs(steps)))
    if comparisons == 0:
        raise ValidationError("no windows to check")
    return MonotonicityResult(violations / comparisons, violations, comparisons, sensitivity, sensitivity == 0.0)


# -------------------------------------------------------- training support


def causal_pairs_for(input_spec, pairs, horizons, encoder_spec=None, step_min=DEFAULT_STEP_MIN):
    """Feature rows of intervention pairs for the MLP ranking penalty."""
    X_lo, X_hi, sign, head = [], [], [], []
    horizons = list(horizons)
    for p in pairs:
        dm = edited_rows(input_spec, p.episode, p.anchor, p.scenario, (p.lo, p.hi), encoder_spec)
        X_lo.append(dm.X[0])
        X_hi.append(dm.X[1])
        sign.append(p.sign)
        head.append(horizons.index(p.probe_horizon_min // step_min))
    width = len(input_spec.columns)
    return fc.CausalPairs(
        np.array(X_lo).reshape(-1, width), np.array(X_hi).reshape(-1, width),
        np.array(sign, dtype=np.float64), np.array(head, dtype=np.int64),
    )


# ------------------------------------------------------------------ report


@dataclass(frozen=True)
class ProbeReport:
    model_name: str
    monotonicity_violation_rate: float
    insensitive: bool
    ranking_error: float
    ranking_penalty: float
    n_pairs: int
    per_scenario: tuple

    def __post_init__(self):
        for name in ("monotonicity_violation_rate", "ranking_error"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1]")

    def as_dict(self):
        d = dict(vars(self))
        d["per_scenario"] = [dict(r) for r in self.per_scenario]
        return d


def probe_model(model, pairs, windows, spec=None, encoder_spec=None, name=None):
    """Full probe report for one model."""
    spec = spec or ProbeSpec()
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no intervention pairs to rank")
    lo, hi = pair_predictions(ModelPredictor(model, encoder_spec), pairs)
    sign = np.array([p.sign for p in pairs])
    errs = ordering_errors(lo, hi, sign)
    rows = []
    for scenario in SCENARIOS:
        idx = [i for i, p in enumerate(pairs) if p.scenario == scenario]
        if idx:
            rows.append({
                "scenario": scenario,
                "probe_horizon_min": spec.horizon(scenario),
                "n_pairs": len(idx),
                "ranking_error": float(errs[idx].mean()),
            })
    mono = dose_monotonicity_check(model, windows, spec.dose_grid, spec.insulin_horizon_min, spec.tolerance,
                                   encoder_spec)
    return ProbeReport(
        name or model.family.kind, mono.violation_rate, mono.insensitive, float(errs.mean()),
        ranking_penalty(lo, hi, sign, spec.margin), len(pairs), tuple(rows),
    )
