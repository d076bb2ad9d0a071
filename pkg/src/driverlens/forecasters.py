"""Forecaster families and the matched-pair contract.

A univariate and a multivariate model in a matched pair share family,
hyperparameters, context, horizons and training seed; they differ only in
input channels. Design-matrix columns are laid out channel by channel in a
canonical order, so restricting a multivariate matrix to the univariate
channels reproduces the univariate matrix exactly. The MLP pair goes one step
further and keeps the multivariate architecture for both members, zeroing the
driver inputs of the univariate one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, ValidationError
from .timeline import DEFAULT_CONTEXT, EVENT_KINDS, episode_hash

CHANNELS = ("cgm_lags", "time_of_day", "iob", "cob", "rag", "raw_events")
ENCODED_CHANNELS = ("iob", "cob", "rag")
DRIVER_CHANNELS = ("iob", "cob", "rag", "raw_events")
FAMILIES = ("persistence", "patient_mean", "ridge_ar", "mlp")


@dataclass(frozen=True)
class FeatureSpec:
    channels: tuple = ("cgm_lags", "time_of_day")
    context: int = DEFAULT_CONTEXT
    lag_stride: int = 6
    allow_mixed: bool = False

    def __post_init__(self):
        channels = tuple(c for c in CHANNELS if c in set(self.channels))
        unknown = set(self.channels) - set(CHANNELS)
        if unknown:
            raise ConfigError(f"unknown channels {sorted(unknown)}")
        if "cgm_lags" not in channels:
            raise ConfigError("cgm_lags must always be present")
        if "raw_events" in channels and set(channels) & set(ENCODED_CHANNELS) and not self.allow_mixed:
            raise ConfigError("raw_events and encoded channels may only coexist with allow_mixed=True")
        if self.context < 1 or self.lag_stride < 1:
            raise ConfigError("context and lag_stride must be >= 1")
        object.__setattr__(self, "channels", channels)

    @property
    def driver_channels(self):
        return tuple(c for c in self.channels if c in DRIVER_CHANNELS)

    @property
    def driver_lags(self):
        return list(range(0, self.context, self.lag_stride))

    def channel_columns(self, channel):
        if channel == "cgm_lags":
            return [f"cgm_lag{k}" for k in range(self.context - 1, -1, -1)]
        if channel == "time_of_day":
            return ["tod_sin", "tod_cos"]
        if channel in ENCODED_CHANNELS:
            return [f"{channel}_lag{k}" for k in self.driver_lags]
        if channel == "raw_events":
            return [f"raw_{kind}_lag{k}" for kind in EVENT_KINDS for k in range(self.context)]
        raise ConfigError(f"unknown channel {channel!r}")

    @property
    def columns(self):
        return [name for ch in self.channels for name in self.channel_columns(ch)]

    def restrict(self, channels):
        return replace(self, channels=tuple(c for c in self.channels if c in channels))


def column_channel(name):
    if name.startswith("cgm_lag"):
        return "cgm_lags"
    if name.startswith("tod_"):
        return "time_of_day"
    if name.startswith("raw_"):
        return "raw_events"
    return name.split("_lag")[0]


def univariate_spec(tod_in_base=True, context=DEFAULT_CONTEXT, lag_stride=6):
    channels = ("cgm_lags", "time_of_day") if tod_in_base else ("cgm_lags",)
    return FeatureSpec(channels, context, lag_stride)


def multivariate_spec(kind="encoded", tod_in_base=True, context=DEFAULT_CONTEXT, lag_stride=6):
    """Multivariate counterpart; ``kind`` is ``encoded`` or ``raw``.

    With ``tod_in_base=False`` time of day counts as a driver and is only
    given to the multivariate member.
    """
    drivers = ENCODED_CHANNELS if kind == "encoded" else ("raw_events",)
    if kind not in ("encoded", "raw"):
        raise ConfigError(f"unknown driver encoding {kind!r}")
    return FeatureSpec(("cgm_lags", "time_of_day") + drivers, context, lag_stride)


# ------------------------------------------------------------ design matrix


@dataclass
class DesignMatrix:
    X: np.ndarray
    Y: np.ndarray
    columns: list
    horizons: tuple
    patients: np.ndarray
    episode_keys: np.ndarray
    anchor_times: np.ndarray

    @property
    def keys(self):
        return list(zip(self.episode_keys.tolist(), self.anchor_times.tolist()))

    def restrict(self, columns):
        idx = [self.columns.index(c) for c in columns]
        return replace(self, X=self.X[:, idx], columns=list(columns))

    def __len__(self):
        return len(self.X)


def episode_key(episode):
    return f"{episode.patient_id}@{episode.grid.start_min}"


def _impulses(episode, kind):
    """Per-grid-point impulse sums; an event at time t lands on the first point >= t."""
    grid = episode.grid
    out = np.zeros(grid.n_points)
    for e in episode.events:
        if e.kind == kind:
            k = -(-(e.t_min - grid.start_min) // grid.step_min)
            if k < grid.n_points:
                out[k] += e.magnitude
    return out


def _episode_block(episode, anchors, spec, horizons, encoded):
    C = spec.context
    n = len(anchors)
    cols = []
    cgm = episode.cgm.values
    for ch in spec.channels:
        if ch == "cgm_lags":
            idx = anchors[:, None] + np.arange(-C + 1, 1)[None, :]
            cols.append(cgm[idx])
        elif ch == "time_of_day":
            t = (episode.grid.start_min + anchors * episode.grid.step_min) % 1440
            ang = 2 * np.pi * t / 1440.0
            cols.append(np.column_stack([np.sin(ang), np.cos(ang)]))
        elif ch in ENCODED_CHANNELS:
            if encoded is None:
                raise ValidationError(f"channel {ch!r} requires encoded channels", field=ch)
            series = encoded.channel(ch)
            lags = np.array(spec.driver_lags)
            cols.append(series[anchors[:, None] - lags[None, :]])
        elif ch == "raw_events":
            lags = np.arange(C)
            for kind in EVENT_KINDS:
                cols.append(_impulses(episode, kind)[anchors[:, None] - lags[None, :]])
    X = np.hstack(cols) if cols else np.zeros((n, 0))
    Y = np.column_stack([cgm[anchors + h] for h in horizons]) if n and horizons else np.zeros((n, len(horizons)))
    return X, Y


def design_matrix(episodes, anchors, spec, horizons, encoded=None):
    """Rows for the given anchors of each episode (same order as inputs)."""
    horizons = tuple(int(h) for h in horizons)
    Xs, Ys, pats, keys, times = [], [], [], [], []
    for i, (ep, anc) in enumerate(zip(episodes, anchors)):
        anc = np.asarray(anc, dtype=np.int64)
        enc = encoded[i] if encoded is not None else None
        X, Y = _episode_block(ep, anc, spec, horizons, enc)
        Xs.append(X)
        Ys.append(Y)
        pats.extend([ep.patient_id] * len(anc))
        keys.extend([episode_key(ep)] * len(anc))
        times.append(ep.grid.start_min + anc * ep.grid.step_min)
    width = len(spec.columns)
    X = np.vstack(Xs) if Xs else np.zeros((0, width))
    Y = np.vstack(Ys) if Ys else np.zeros((0, len(horizons)))
    return DesignMatrix(
        X, Y, spec.columns, horizons, np.array(pats, dtype=object), np.array(keys, dtype=object),
        np.concatenate(times).astype(np.int64) if times else np.zeros(0, dtype=np.int64),
    )


def build_design_matrix(episodes, windows, spec, encoded=None):
    """Design matrix from ``ForecastWindow`` objects.

    ``windows`` is a flat sequence; rows follow the order of ``episodes`` and,
    within an episode, the window order. ``encoded`` aligns with ``episodes``.
    """
    if not windows:
        return design_matrix([], [], spec, (), encoded)
    horizons = windows[0].horizons
    by_ep = {id(ep): [] for ep in episodes}
    for w in windows:
        if w.context != spec.context or w.horizons != horizons:
            raise ValidationError("windows disagree with the feature spec context or horizons")
        by_ep[id(w.episode)].append(w.anchor)
    anchors = [np.array(by_ep[id(ep)], dtype=np.int64) for ep in episodes]
    return design_matrix(episodes, anchors, spec, horizons, encoded)


# -------------------------------------------------------------- model types


@dataclass(frozen=True)
class ModelFamily:
    kind: str = "ridge_ar"
    ridge_lambda: float = 1e-3
    hidden: int = 32
    learning_rate: float = 3e-3
    epochs: int = 20
    batch_size: int = 256
    weight_decay: float = 1e-5
    causal_weight: float = 0.0
    causal_margin: float = 1.0

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ConfigError(f"unknown model family {self.kind!r}")
        if self.ridge_lambda < 0 or self.causal_weight < 0:
            raise ConfigError("ridge_lambda and causal_weight must be >= 0")
        if self.hidden < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("hidden, epochs and batch_size must be positive")


@dataclass
class TrainedModel:
    family: ModelFamily
    spec: FeatureSpec
    input_spec: FeatureSpec
    horizons: tuple
    columns: list
    mean: np.ndarray = None
    scale: np.ndarray = None
    input_mask: np.ndarray = None
    weights: np.ndarray = None      # ridge: (d, H) on standardized inputs
    intercept: np.ndarray = None    # ridge: (H,)
    mlp: dict = None                # W1, b1, W2, b2, target_mean, target_scale
    patient_means: dict = None
    metadata: dict = field(default_factory=dict)

    @property
    def n_inputs(self):
        return len(self.columns)

    def raw_coefficients(self):
        """Ridge weights on unstandardized features, shape ``(d, H)``."""
        return self.weights / self.scale[:, None]


def _standardize_stats(X):
    mean = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
    scale = X.std(axis=0) if len(X) else np.ones(X.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def _standardize(model, X):
    Z = (X - model.mean) / model.scale
    if model.input_mask is not None:
        Z = Z * model.input_mask
    return Z


def data_fingerprint(episodes):
    hashes = sorted(episode_hash(ep) for ep in episodes)
    return hashlib.sha256("".join(hashes).encode()).hexdigest(), hashes


def _last_cgm_index(columns):
    return columns.index("cgm_lag0")


def fit(family, dm, seed=0, spec=None, input_spec=None, input_mask=None, causal_pairs=None, train_episodes=None):
    """Train one model on a design matrix.

    ``input_mask`` zeroes standardized inputs (the univariate MLP of a matched
    pair). ``causal_pairs`` is a ``CausalPairs`` batch used by the MLP ranking
    penalty when ``family.causal_weight > 0``.
    """
    X, Y = dm.X, dm.Y
    if len(X) < 1:
        raise ValidationError("need at least one training row")
    spec = spec or input_spec
    if spec is None:
        raise ValidationError("fit needs the feature spec")
    input_spec = input_spec or spec
    if list(dm.columns) != input_spec.columns:
        raise ValidationError("design matrix columns do not match the input spec")
    meta = {"seed": int(seed), "n_rows": int(len(X))}
    if train_episodes is not None:
        meta["data_hash"], meta["train_hashes"] = data_fingerprint(train_episodes)
    model = TrainedModel(family, spec, input_spec, tuple(dm.horizons), list(dm.columns), metadata=meta)
    mean, scale = _standardize_stats(X)
    model.mean, model.scale = mean, scale
    if input_mask is not None:
        model.input_mask = np.asarray(input_mask, dtype=np.float64)
    kind = family.kind
    if kind == "persistence":
        return model
    if kind == "patient_mean":
        model.patient_means = {}
        for pid in sorted(set(dm.patients.tolist())):
            model.patient_means[pid] = Y[dm.patients == pid].mean(axis=0)
        model.patient_means["__all__"] = Y.mean(axis=0)
        return model
    Z = _standardize(model, X)
    if kind == "ridge_ar":
        model.weights, model.intercept = ridge_solve(Z, Y, family.ridge_lambda)
        return model
    _fit_mlp(model, Z, X, Y, seed, causal_pairs)
    return model


def ridge_solve(Z, Y, lam):
    """Solve ``(Z'Z/n + lam I) w = Z'(Y - Ybar)/n`` (intercept left unpenalized)."""
    n, d = Z.shape
    zc = Z - Z.mean(axis=0)
    ybar = Y.mean(axis=0)
    A = zc.T @ zc / n + lam * np.eye(d)
    b = zc.T @ (Y - ybar) / n
    if lam == 0:
        if d and np.linalg.matrix_rank(A, tol=1e-10 * max(1.0, np.abs(A).max())) < d:
            raise ValidationError("singular normal equations with lambda = 0; use ridge_lambda > 0")
    w = np.linalg.solve(A, b) if d else np.zeros((0, Y.shape[1]))
    intercept = ybar - Z.mean(axis=0) @ w
    return w, intercept


def predict(model, dm_or_X, patients=None):
    """Predictions ``(n, H)`` in mg/dL."""
    X = dm_or_X.X if isinstance(dm_or_X, DesignMatrix) else np.atleast_2d(np.asarray(dm_or_X, dtype=np.float64))
    if patients is None and isinstance(dm_or_X, DesignMatrix):
        patients = dm_or_X.patients
    if X.shape[1] != model.n_inputs:
        raise ValidationError(f"expected {model.n_inputs} features, got {X.shape[1]}")
    H = len(model.horizons)
    kind = model.family.kind
    if kind == "persistence":
        last = X[:, _last_cgm_index(model.columns)]
        return np.repeat(last[:, None], H, axis=1)
    if kind == "patient_mean":
        fallback = model.patient_means["__all__"]
        pats = patients if patients is not None else [None] * len(X)
        return np.array([model.patient_means.get(p, fallback) for p in pats]).reshape(len(X), H)
    Z = _standardize(model, X)
    if kind == "ridge_ar":
        return Z @ model.weights + model.intercept
    out, _ = _mlp_forward(model.mlp, Z)
    last = X[:, _last_cgm_index(model.columns)]
    return last[:, None] + model.mlp["target_mean"] + model.mlp["target_scale"] * out


def forecast(model, features_row, patient_id=None):
    """Per-horizon predictions for a single feature row."""
    row = np.asarray(features_row, dtype=np.float64)
    if row.ndim != 1:
        raise ValidationError("forecast expects one feature row")
    pats = [patient_id] if patient_id is not None else None
    return predict(model, row[None, :], patients=pats)[0]


# --------------------------------------------------------------------- MLP


def _mlp_shapes(d, hidden, H):
    return [("W1", (d, hidden)), ("b1", (hidden,)), ("W2", (hidden, H)), ("b2", (H,))]


def unpack(theta, d, hidden, H):
    params, i = {}, 0
    for name, shape in _mlp_shapes(d, hidden, H):
        size = int(np.prod(shape))
        params[name] = theta[i:i + size].reshape(shape)
        i += size
    return params


def pack(params):
    return np.concatenate([params[k].ravel() for k in ("W1", "b1", "W2", "b2")])


def _mlp_forward(params, Z):
    A = np.tanh(Z @ params["W1"] + params["b1"])
    return A @ params["W2"] + params["b2"], A


@dataclass
class CausalPairs:
    """Feature rows of intervention pairs for the ranking penalty.

    ``sign`` is +1 when the ``hi`` edit truly raises glucose and -1 when it
    lowers it; ``head`` indexes the probe horizon among the model horizons.
    """

    X_lo: np.ndarray
    X_hi: np.ndarray
    sign: np.ndarray
    head: np.ndarray

    def __len__(self):
        return len(self.sign)


def mlp_objective(theta, Z, R, dims, weight_decay=0.0, pairs=None, causal_weight=0.0, margin=1.0, target_scale=None):
    """Loss and analytic gradient for the MLP.

    ``0.5 * mean((out - R)**2) + 0.5 * weight_decay * |W|^2`` plus
    ``causal_weight * mean(max(0, margin - sign * (pred_hi - pred_lo)))``,
    where pair predictions are in mg/dL (``target_scale`` per head) and
    ``pairs`` carries standardized, masked rows.
    """
    d, hidden, H = dims
    p = unpack(theta, d, hidden, H)
    n = len(Z)
    out, A = _mlp_forward(p, Z)
    diff = out - R
    loss = 0.5 * np.mean(diff * diff) * H
    g_out = diff / n
    grads = _backward(p, Z, A, g_out)
    if weight_decay:
        loss += 0.5 * weight_decay * (np.sum(p["W1"] ** 2) + np.sum(p["W2"] ** 2))
        grads["W1"] += weight_decay * p["W1"]
        grads["W2"] += weight_decay * p["W2"]
    if pairs is not None and causal_weight > 0 and len(pairs):
        m = len(pairs)
        out_lo, A_lo = _mlp_forward(p, pairs.X_lo)
        out_hi, A_hi = _mlp_forward(p, pairs.X_hi)
        rows = np.arange(m)
        scale = target_scale[pairs.head] if target_scale is not None else 1.0
        gap = scale * (out_hi[rows, pairs.head] - out_lo[rows, pairs.head])
        slack = margin - pairs.sign * gap
        active = slack > 0
        loss += causal_weight * np.sum(np.where(active, slack, 0.0)) / m
        coef = np.where(active, -pairs.sign * scale, 0.0) * causal_weight / m
        g_hi = np.zeros_like(out_hi)
        g_hi[rows, pairs.head] = coef
        for key, g in _backward(p, pairs.X_hi, A_hi, g_hi).items():
            grads[key] += g
        for key, g in _backward(p, pairs.X_lo, A_lo, -g_hi).items():
            grads[key] += g
    return loss, pack(grads)


def _backward(p, Z, A, g_out):
    g = {"W2": A.T @ g_out, "b2": g_out.sum(axis=0)}
    g_pre = (g_out @ p["W2"].T) * (1.0 - A * A)
    g["W1"] = Z.T @ g_pre
    g["b1"] = g_pre.sum(axis=0)
    return g


def init_mlp(d, hidden, H, seed):
    gen = rngmod.stream(seed, 0, "mlp-init")
    params = {
        "W1": gen.normal(0.0, 1.0 / math.sqrt(max(d, 1)), (d, hidden)),
        "b1": np.zeros(hidden),
        "W2": gen.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, H)),
        "b2": np.zeros(H),
    }
    return pack(params)


def _fit_mlp(model, Z, X, Y, seed, causal_pairs):
    fam = model.family
    last = X[:, _last_cgm_index(model.columns)]
    target = Y - last[:, None]
    t_mean = target.mean(axis=0)
    t_scale = target.std(axis=0)
    t_scale = np.where(t_scale > 1e-12, t_scale, 1.0)
    R = (target - t_mean) / t_scale
    d, H = Z.shape[1], Y.shape[1]
    dims = (d, fam.hidden, H)
    theta = init_mlp(d, fam.hidden, H, seed)
    pairs = None
    if causal_pairs is not None and fam.causal_weight > 0 and len(causal_pairs):
        pairs = CausalPairs(
            _standardize(model, causal_pairs.X_lo), _standardize(model, causal_pairs.X_hi),
            np.asarray(causal_pairs.sign, dtype=np.float64), np.asarray(causal_pairs.head, dtype=np.int64),
        )
    gen = rngmod.stream(seed, 0, "mlp-shuffle")
    m_t = np.zeros_like(theta)
    v_t = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(Z)
    for _ in range(fam.epochs):
        order = gen.permutation(n)
        for start in range(0, n, fam.batch_size):
            idx = order[start:start + fam.batch_size]
            _, grad = mlp_objective(
                theta, Z[idx], R[idx], dims, fam.weight_decay, pairs, fam.causal_weight, fam.causal_margin, t_scale
            )
            step += 1
            m_t = b1 * m_t + (1 - b1) * grad
            v_t = b2 * v_t + (1 - b2) * grad * grad
            m_hat = m_t / (1 - b1**step)
            v_hat = v_t / (1 - b2**step)
            theta = theta - fam.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
    params = unpack(theta, d, fam.hidden, H)
    params["target_mean"] = t_mean
    params["target_scale"] = t_scale
    model.mlp = params


# ------------------------------------------------------------- matched pair


@dataclass
class MatchedPair:
    uni: TrainedModel
    multi: TrainedModel

    def __post_init__(self):
        u, m = self.uni, self.multi
        if u.family != m.family:
            raise ValidationError("matched pair members must share family and hyperparameters")
        if u.spec.context != m.spec.context or u.horizons != m.horizons:
            raise ValidationError("matched pair members must share context and horizons")
        if u.metadata.get("seed") != m.metadata.get("seed"):
            raise ValidationError("matched pair members must share the training seed")
        if not set(u.spec.channels) < set(m.spec.channels):
            raise ValidationError("univariate channels must be a strict subset of multivariate channels")


def driver_mask(uni_spec, multi_spec):
    uni = set(uni_spec.channels)
    return np.array([1.0 if column_channel(c) in uni else 0.0 for c in multi_spec.columns])


def fit_pair(family, uni_spec, multi_spec, dm_multi, seed=0, causal_pairs=None, train_episodes=None):
    """Train both members from the multivariate design matrix.

    Ridge/persistence/patient_mean members see only their own columns; the
    MLP univariate member keeps the full input layer with drivers masked.
    """
    if family.kind == "mlp":
        mask = driver_mask(uni_spec, multi_spec)
        uni = fit(family, dm_multi, seed, spec=uni_spec, input_spec=multi_spec, input_mask=mask,
                  train_episodes=train_episodes)
    else:
        uni = fit(family, dm_multi.restrict(uni_spec.columns), seed, spec=uni_spec, train_episodes=train_episodes)
    multi = fit(family, dm_multi, seed, spec=multi_spec, causal_pairs=causal_pairs, train_episodes=train_episodes)
    return MatchedPair(uni, multi)


def model_view(model, dm):
    """Restrict a (multivariate) design matrix to the columns ``model`` consumes."""
    if list(dm.columns) == model.columns:
        return dm
    return dm.restrict(model.columns)


# ------------------------------------------------------------ persistence


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def model_to_dict(model):
    return {
        "format": "driverlens-model/1",
        "family": _jsonable(vars(model.family)),
        "spec": _jsonable(vars(model.spec)),
        "input_spec": _jsonable(vars(model.input_spec)),
        "horizons": list(model.horizons),
        "columns": list(model.columns),
        "standardization": {"mean": _jsonable(model.mean), "scale": _jsonable(model.scale)},
        "input_mask": _jsonable(model.input_mask),
        "weights": _jsonable(model.weights),
        "intercept": _jsonable(model.intercept),
        "mlp": _jsonable(model.mlp),
        "patient_means": _jsonable(model.patient_means),
        "metadata": _jsonable(model.metadata),
    }


def save_model(model, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _arr(value):
    return None if value is None else np.asarray(value, dtype=np.float64)


def model_from_dict(obj):
    if obj.get("format") != "driverlens-model/1":
        raise ValidationError("not a driverlens model file", field="format")
    spec = obj["spec"]
    ispec = obj["input_spec"]
    model = TrainedModel(
        ModelFamily(**obj["family"]),
        FeatureSpec(tuple(spec["channels"]), spec["context"], spec["lag_stride"], spec["allow_mixed"]),
        FeatureSpec(tuple(ispec["channels"]), ispec["context"], ispec["lag_stride"], ispec["allow_mixed"]),
        tuple(obj["horizons"]),
        list(obj["columns"]),
        _arr(obj["standardization"]["mean"]),
        _arr(obj["standardization"]["scale"]),
        _arr(obj["input_mask"]),
        _arr(obj["weights"]),
        _arr(obj["intercept"]),
        None,
        None,
        obj.get("metadata") or {},
    )
    if obj.get("mlp"):
        model.mlp = {k: _arr(v) for k, v in obj["mlp"].items()}
    if obj.get("patient_means"):
        model.patient_means = {k: _arr(v) for k, v in obj["patient_means"].items()}
    return model


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
