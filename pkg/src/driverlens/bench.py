"""Loss tables, Delta_drivers with episode-block bootstrap CIs, sweeps, splits and attribution."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import encoders
from . import forecasters as fc
from . import rng as rngmod
from .errors import ConfigError, ValidationError
from .fidelity import degrade_episode, get_preset
from .timeline import DEFAULT_STEP_MIN, episode_hash, valid_anchors

LOSSES = ("RMSE", "MAE")
SPLITS = ("within_subject", "cross_subject")
DEFAULT_GROUPS = {
    "cgm": ("cgm_lags",),
    "time_of_day": ("time_of_day",),
    "drivers": fc.DRIVER_CHANNELS,
}


@dataclass(frozen=True)
class ForecastTask:
    horizons_min: tuple = (30, 60)
    loss: str = "RMSE"
    split: str = "within_subject"
    train_frac: float = 0.7
    context: int = 24
    stride: int = 1
    step_min: int = DEFAULT_STEP_MIN

    def __post_init__(self):
        horizons = tuple(sorted(int(h) for h in self.horizons_min))
        object.__setattr__(self, "horizons_min", horizons)
        if not horizons or horizons[0] <= 0:
            raise ConfigError("horizons must be positive")
        for h in horizons:
            if h % self.step_min:
                raise ConfigError(f"horizon {h} min is not a multiple of the {self.step_min}-min grid step")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")
        if not 0 < self.train_frac < 1:
            raise ConfigError("train_frac must be in (0, 1)")

    @property
    def horizon_points(self):
        return tuple(h // self.step_min for h in self.horizons_min)


def aggregate_loss(errors, loss):
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValidationError("no error records to aggregate")
    if loss == "RMSE":
        return math.sqrt(np.sum(errors * errors) / errors.size)
    return float(np.sum(np.abs(errors)) / errors.size)


@dataclass
class LossTable:
    """Per-window signed errors (prediction minus target) in canonical key order."""

    model_name: str
    loss: str
    horizons_min: tuple
    episode_keys: np.ndarray
    anchor_times: np.ndarray
    errors: np.ndarray

    def __post_init__(self):
        order = sorted(range(len(self.episode_keys)), key=lambda i: (self.episode_keys[i], self.anchor_times[i]))
        order = np.array(order, dtype=np.int64)
        self.episode_keys = np.asarray(self.episode_keys, dtype=object)[order]
        self.anchor_times = np.asarray(self.anchor_times, dtype=np.int64)[order]
        self.errors = np.asarray(self.errors, dtype=np.float64).reshape(len(order), len(self.horizons_min))[order]

    def column(self, horizon_min):
        try:
            return self.horizons_min.index(int(horizon_min))
        except ValueError:
            raise ValidationError(f"horizon {horizon_min} min not in table") from None

    def aggregate(self, horizon_min):
        return aggregate_loss(self.errors[:, self.column(horizon_min)], self.loss)

    @property
    def keys(self):
        return list(zip(self.episode_keys.tolist(), self.anchor_times.tolist()))

    def __len__(self):
        return len(self.errors)

    def episode_stats(self, horizon_min):
        """Per-episode (sum of per-window losses, count) for resampling."""
        e = self.errors[:, self.column(horizon_min)]
        w = e * e if self.loss == "RMSE" else np.abs(e)
        groups, inverse = np.unique(self.episode_keys.astype(str), return_inverse=True)
        sums = np.bincount(inverse, weights=w, minlength=len(groups))
        counts = np.bincount(inverse, minlength=len(groups)).astype(np.float64)
        return groups, sums, counts

    def to_records(self):
        rows = []
        for i, (k, t) in enumerate(self.keys):
            for j, h in enumerate(self.horizons_min):
                rows.append({"episode": k, "anchor_min": t, "horizon_min": h, "error": float(self.errors[i, j])})
        return rows


def split_episodes(episodes, task):
    """Train/test episodes for the task's split.

    ``within_subject`` keeps every patient and cuts each episode at a grid
    point (a whole day when the episode is whole days); ``cross_subject``
    holds out the last patients in input order.
    """
    episodes = list(episodes)
    if task.split == "within_subject":
        train, test = [], []
        for ep in episodes:
            n = ep.grid.n_points
            per_day = 1440 // ep.grid.step_min
            if n % per_day == 0 and n // per_day >= 2:
                cut = max(1, min(n // per_day - 1, int(round(task.train_frac * n / per_day)))) * per_day
            else:
                cut = int(round(task.train_frac * n))
            train.append(ep.slice(0, cut))
            test.append(ep.slice(cut, n))
        return train, test
    if len(episodes) < 2:
        raise ValidationError("cross_subject split needs at least two patients")
    n_train = max(1, min(len(episodes) - 1, int(round(task.train_frac * len(episodes)))))
    return episodes[:n_train], episodes[n_train:]


def windows_anchors(episodes, task):
    return [valid_anchors(ep, task.context, task.horizon_points, task.stride) for ep in episodes]


def task_matrix(episodes, task, spec, encoder_spec=None, encoded=None):
    """Design matrix for all valid windows of ``episodes`` under ``task``."""
    if spec.context != task.context:
        raise ConfigError("feature context must equal the task context")
    if encoded is None and set(spec.channels) & set(fc.ENCODED_CHANNELS):
        encoded = [encoders.encode_episode(ep, encoder_spec) for ep in episodes]
    return fc.design_matrix(episodes, windows_anchors(episodes, task), spec, task.horizon_points, encoded)


def check_disjoint(model, episodes):
    train = set(model.metadata.get("train_hashes") or ())
    if not train:
        return
    overlap = [ep.patient_id for ep in episodes if episode_hash(ep) in train]
    if overlap:
        raise ValidationError(f"train/test overlap detected for episodes {sorted(set(overlap))}")


def evaluate_matrix(model, dm, task, name=None):
    view = fc.model_view(model, dm)
    pred = fc.predict(model, view)
    errors = pred - view.Y
    return LossTable(name or model.family.kind, task.loss, task.horizons_min, dm.episode_keys, dm.anchor_times, errors)


def evaluate(model, episodes, task, encoder_spec=None, encoded=None, name=None):
    """Loss table for ``model`` over every valid window of ``episodes``."""
    check_disjoint(model, episodes)
    if tuple(model.horizons) != task.horizon_points:
        raise ValidationError("model horizons do not match the task")
    dm = task_matrix(episodes, task, model.input_spec, encoder_spec, encoded)
    return evaluate_matrix(model, dm, task, name)


# ------------------------------------------------------------------- delta


def delta_from_losses(l_uni, l_multi):
    delta = l_uni - l_multi
    pct = 100.0 * delta / l_uni if l_uni != 0 else 0.0
    return delta, pct


@dataclass(frozen=True)
class DeltaRow:
    horizon_min: int
    l_uni: float
    l_multi: float
    delta: float
    pct: float
    ci_low: float
    ci_high: float
    n_windows: int
    n_episodes: int

    def as_dict(self):
        return dict(vars(self))


def _percentile_pair(stats, level):
    alpha = (1.0 - level) / 2.0
    lo = float(np.quantile(stats, alpha, method="lower"))
    hi = float(np.quantile(stats, 1.0 - alpha, method="higher"))
    return lo, hi


def _resample_weights(n_groups, B, gen):
    return gen.multinomial(n_groups, np.full(n_groups, 1.0 / n_groups), size=B).astype(np.float64)


def bootstrap_ci(differences_by_episode, B=1000, rng=None, level=0.95):
    """Episode-block percentile CI for the mean window difference.

    ``differences_by_episode`` is a sequence of 1-D arrays, one per episode.
    """
    groups = [np.asarray(d, dtype=np.float64).ravel() for d in differences_by_episode]
    groups = [g for g in groups if g.size]
    if len(groups) < 2:
        raise ValidationError("bootstrap needs at least two episodes; simulate more data")
    allv = np.concatenate(groups)
    if np.all(allv == allv[0]):
        return float(allv[0]), float(allv[0])
    gen = rng if rng is not None else rngmod.stream(0, 0, "bootstrap")
    sums = np.array([g.sum() for g in groups])
    counts = np.array([g.size for g in groups], dtype=np.float64)
    W = _resample_weights(len(groups), B, gen)
    stats = (W @ sums) / (W @ counts)
    return _percentile_pair(stats, level)


def _loss_from(sums, counts, loss):
    mean = sums / counts
    return np.sqrt(mean) if loss == "RMSE" else mean


def delta_drivers(uni, multi, horizon_min, B=1000, seed=0, level=0.95):
    """Delta row with an episode-block bootstrap CI (``ci_low <= delta <= ci_high``)."""
    if uni.loss != multi.loss:
        raise ValidationError("loss tables use different losses")
    ku, km = uni.keys, multi.keys
    if ku != km:
        su, sm = set(ku), set(km)
        missing = sorted(su ^ sm)[:10]
        raise ValidationError(f"window keys differ between tables; e.g. {missing}")
    l_uni, l_multi = uni.aggregate(horizon_min), multi.aggregate(horizon_min)
    delta, pct = delta_from_losses(l_uni, l_multi)
    gu, su, cu = uni.episode_stats(horizon_min)
    _, sm, _ = multi.episode_stats(horizon_min)
    if len(gu) < 2:
        raise ValidationError("bootstrap needs at least two episodes; simulate more data")
    gen = rngmod.stream(seed, int(horizon_min), "delta-bootstrap")
    W = _resample_weights(len(gu), B, gen)
    n = W @ cu
    stats = _loss_from(W @ su, n, uni.loss) - _loss_from(W @ sm, n, uni.loss)
    lo, hi = _percentile_pair(stats, level)
    lo, hi = min(lo, delta), max(hi, delta)
    return DeltaRow(int(horizon_min), l_uni, l_multi, delta, pct, lo, hi, len(uni), len(gu))


# ------------------------------------------------------------ pair running


@dataclass(frozen=True)
class PairSpec:
    family: fc.ModelFamily = field(default_factory=fc.ModelFamily)
    uni: fc.FeatureSpec = field(default_factory=fc.univariate_spec)
    multi: fc.FeatureSpec = field(default_factory=fc.multivariate_spec)

    def __post_init__(self):
        if not set(self.uni.channels) < set(self.multi.channels):
            raise ConfigError("univariate channels must be a strict subset of multivariate channels")
        if self.uni.context != self.multi.context:
            raise ConfigError("pair members must share the context length")

    @property
    def tod_in_base(self):
        return "time_of_day" in self.uni.channels


@dataclass
class PairRun:
    pair: fc.MatchedPair
    uni_table: LossTable
    multi_table: LossTable
    rows: list
    test_matrix: fc.DesignMatrix
    train_episodes: list
    test_episodes: list


def run_pair(pair_spec, episodes, task, encoder_spec=None, seed=0, B=1000, causal_pairs=None):
    """Split, train both members on identical rows, evaluate, and compute Delta rows."""
    train, test = split_episodes(episodes, task)
    dm_train = task_matrix(train, task, pair_spec.multi, encoder_spec)
    dm_test = task_matrix(test, task, pair_spec.multi, encoder_spec)
    pair = fc.fit_pair(pair_spec.family, pair_spec.uni, pair_spec.multi, dm_train, seed,
                       causal_pairs=causal_pairs, train_episodes=train)
    check_disjoint(pair.multi, test)
    ut = evaluate_matrix(pair.uni, dm_test, task, "uni")
    mt = evaluate_matrix(pair.multi, dm_test, task, "multi")
    rows = [delta_drivers(ut, mt, h, B, seed) for h in task.horizons_min]
    return PairRun(pair, ut, mt, rows, dm_test, train, test)


def degrade_cohort(episodes, preset, seed):
    """Observed diaries for a noise level; streams keyed by patient position."""
    config = get_preset(preset) if isinstance(preset, str) else preset
    return [degrade_episode(ep, config, rngmod.stream(seed, i, "fidelity:" + config.seed_tag))
            for i, ep in enumerate(episodes)]


@dataclass
class SweepLevel:
    level: str
    rows: list
    run: PairRun = field(repr=False, default=None)


def fidelity_sweep(pair_spec, episodes, noise_levels, task, encoder_spec=None, seed=0, B=1000, keep_runs=False):
    """One full train+evaluate cycle per noise level, identical seeds throughout."""
    levels = list(noise_levels)
    if len(levels) < 2:
        raise ConfigError("a fidelity sweep needs at least two noise levels")
    out = []
    for level in levels:
        observed = degrade_cohort(episodes, level, seed)
        run = run_pair(pair_spec, observed, task, encoder_spec, seed, B)
        name = level if isinstance(level, str) else level.seed_tag
        out.append(SweepLevel(name, run.rows, run if keep_runs else None))
    return out


# --------------------------------------------------------- subject splits


@dataclass(frozen=True)
class SubjectSplitResult:
    horizon_min: int
    within: float
    cross: float
    ratio: float
    ci_low: float
    ci_high: float
    n_patients: int
    per_horizon: dict


def subject_split_eval(family, spec, episodes, task, encoder_spec=None, seed=0, B=1000, level=0.95):
    """Within- vs cross-subject loss over per-patient models.

    Each patient gets a model trained on the head of its own episode.
    ``within`` averages each model's loss on its own patient's tail;
    ``cross`` averages the loss of every other patient's model on that tail,
    so both sides use the same amount of training data. The headline ratio is
    at the longest task horizon; its CI resamples test patients.
    """
    episodes = list(episodes)
    if len(episodes) < 4:
        raise ValidationError("subject_split_eval needs at least 4 patients")
    base = ForecastTask(task.horizons_min, task.loss, "within_subject", task.train_frac, task.context,
                        task.stride, task.step_min)
    train, test = split_episodes(episodes, base)
    if len({ep.patient_id for ep in episodes}) != len(episodes):
        raise ValidationError("subject_split_eval expects one episode per patient id")
    dms_train = [task_matrix([ep], base, spec, encoder_spec) for ep in train]
    dms_test = [task_matrix([ep], base, spec, encoder_spec) for ep in test]
    models = [fc.fit(family, dm, seed, spec=spec, train_episodes=[ep]) for dm, ep in zip(dms_train, train)]
    P, H = len(episodes), len(base.horizons_min)
    # loss[j, i, h]: model j on patient i's tail
    sq = np.empty((P, P, H))
    for j, model in enumerate(models):
        for i, dm in enumerate(dms_test):
            err = fc.predict(model, dm) - dm.Y
            sq[j, i] = np.mean(err * err, axis=0) if base.loss == "RMSE" else np.mean(np.abs(err), axis=0)
    loss = np.sqrt(sq) if base.loss == "RMSE" else sq
    diag = loss[np.arange(P), np.arange(P)]                      # (P, H)
    off = (loss.sum(axis=0) - diag) / (P - 1)                     # (P, H) mean over j != i
    per_h = {}
    for k, h in enumerate(base.horizons_min):
        w, c = float(diag[:, k].mean()), float(off[:, k].mean())
        per_h[h] = {"within": w, "cross": c, "ratio": c / w if w > 0 else float("nan")}
    k = H - 1
    within, cross = float(diag[:, k].mean()), float(off[:, k].mean())
    ratio = cross / within if within > 0 else float("nan")
    gen = rngmod.stream(seed, 0, "subject-bootstrap")
    W = _resample_weights(P, B, gen)
    stats = (W @ off[:, k]) / (W @ diag[:, k])
    lo, hi = _percentile_pair(stats, level)
    lo, hi = min(lo, ratio), max(hi, ratio)
    return SubjectSplitResult(base.horizons_min[k], within, cross, ratio, lo, hi, P, per_h)


# ------------------------------------------------------------ attribution


@dataclass(frozen=True)
class AttributionReport:
    groups: tuple
    increases: dict
    shares: dict
    residual: float
    base_loss: float
    repeats: int

    def share(self, group):
        return self.shares[group]


def permutation_importance(model, dm, channel_groups=None, R=20, rng=None, loss="RMSE", horizon_min=None,
                           step_min=DEFAULT_STEP_MIN):
    """Loss increase when one group's columns are jointly permuted across windows.

    Increases are averaged over ``R`` permutations and clipped at zero before
    normalizing; groups whose channels the model lacks get exactly zero.
    ``horizon_min=None`` pools all heads.
    """
    groups = dict(channel_groups or DEFAULT_GROUPS)
    for name, chans in groups.items():
        unknown = set(chans) - set(fc.CHANNELS)
        if unknown:
            raise ValidationError(f"group {name!r} names channels not in any feature spec: {sorted(unknown)}")
    view = fc.model_view(model, dm)
    if horizon_min is None:
        cols = slice(None)
    else:
        cols = [list(model.horizons).index(int(horizon_min) // step_min)]
    gen = rng if rng is not None else rngmod.stream(0, 0, "permutation")

    def score(X):
        err = (fc.predict(model, X, patients=view.patients) - view.Y)[:, cols]
        return aggregate_loss(err, loss)

    base = score(view.X)
    increases = {}
    for name, chans in groups.items():
        idx = [i for i, c in enumerate(view.columns) if fc.column_channel(c) in chans]
        if not idx:
            increases[name] = 0.0
            continue
        total = 0.0
        for _ in range(R):
            X = view.X.copy()
            perm = gen.permutation(len(X))
            X[:, idx] = view.X[perm][:, idx]
            total += score(X) - base
        increases[name] = max(total / R, 0.0)
    s = sum(increases.values())
    shares = {k: (v / s if s > 0 else 0.0) for k, v in increases.items()}
    residual = 0.0 if s > 0 else 1.0
    return AttributionReport(tuple(groups), increases, shares, residual, base, R)
