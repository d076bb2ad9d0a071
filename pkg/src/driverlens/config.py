"""Flat typed run configuration with ``DRIVERLENS_<KEY>`` environment overrides.

A config file is TOML whose keys are flattened to dotted names, so
``[model]\\nfamily = "mlp"`` and ``"model.family" = "mlp"`` are the same
setting. Environment variables name keys in upper case with dots written as
double underscores (``DRIVERLENS_MODEL__FAMILY=mlp``); their values are parsed
as TOML literals, falling back to a bare string.
"""
from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import bench, encoders, fidelity
from . import forecasters as fc
from .errors import ConfigError
from .physio import DEFAULT_BOUNDS, DEFAULT_COUPLING, PARAM_NAMES, CohortSpec
from .policy import PolicySpec
from .probe import ProbeSpec

ENV_PREFIX = "DRIVERLENS_"

# key -> (type, default); "required" has no default
SCHEMA = {
    "seed": (int, None),
    "out": (str, "driverlens-out"),
    "workers": (int, 1),
    "n_patients": (int, 20),
    "days": (int, 14),
    "coupling": (float, DEFAULT_COUPLING),
    "preset": (str, "clean"),
    "presets": (list, ["clean", "paper-C2", "extreme"]),
    "encoder.iob_tau": (float, encoders.DEFAULT_IOB_TAU),
    "encoder.cob_tau": (float, encoders.DEFAULT_COB_TAU),
    "encoder.f_bio": (float, encoders.DEFAULT_F_BIO),
    "model.family": (str, "ridge_ar"),
    "model.ridge_lambda": (float, 1e-3),
    "model.hidden": (int, 32),
    "model.learning_rate": (float, 3e-3),
    "model.epochs": (int, 10),
    "model.batch_size": (int, 256),
    "model.weight_decay": (float, 1e-5),
    "model.causal_weight": (float, 0.0),
    "model.causal_margin": (float, 1.0),
    "features.encoding": (str, "encoded"),
    "features.tod_in_base": (bool, True),
    "features.context": (int, 24),
    "features.lag_stride": (int, 6),
    "task.horizons": (list, [30, 60]),
    "task.loss": (str, "RMSE"),
    "task.split": (str, "within_subject"),
    "task.train_frac": (float, 0.7),
    "task.stride": (int, 1),
    "bootstrap.B": (int, 1000),
    "attribution.repeats": (int, 20),
    "probe.dose_grid": (list, [0.0, 2.0, 4.0]),
    "probe.carb_grid": (list, [0.0, 20.0, 40.0]),
    "probe.insulin_horizon": (int, 120),
    "probe.carb_horizon": (int, 60),
    "probe.anchors_per_patient": (int, 15),
    "probe.tolerance": (float, 0.5),
}
_POLICY_FIELDS = {f for f in PolicySpec.__dataclass_fields__}
_FIDELITY_FIELDS = {f for f in fidelity.PerturbationConfig.__dataclass_fields__} - {"seed_tag"}
# settings that affect how a run executes but never what it computes
NON_SEMANTIC = ("out", "workers")


def flatten(obj, prefix=""):
    out = {}
    for key, value in obj.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(key, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is list and isinstance(value, tuple):
        return list(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


def _kind_for(key):
    if key in SCHEMA:
        return SCHEMA[key][0]
    head, _, tail = key.partition(".")
    if head == "cohort" and tail in PARAM_NAMES:
        return list
    if head == "policy" and tail in _POLICY_FIELDS:
        default = getattr(PolicySpec(), tail)
        return list if isinstance(default, tuple) else (float if isinstance(default, float) else type(default))
    if head.startswith("fidelity") and tail in _FIDELITY_FIELDS:
        default = getattr(fidelity.PerturbationConfig(), tail)
        return type(default)
    raise ConfigError(f"unknown configuration key {key!r}")


def parse_env_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def env_overrides(environ=None):
    environ = os.environ if environ is None else environ
    out = {}
    for name, text in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            # restore case of mixed-case keys (cohort params such as SI, CR)
            for candidate in list(SCHEMA) + [f"cohort.{p}" for p in PARAM_NAMES]:
                if candidate.lower() == key:
                    key = candidate
                    break
            out[key] = parse_env_value(text)
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    # ---- derived objects

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def out(self):
        return self.values["out"]

    @property
    def workers(self):
        return self.values["workers"]

    def cohort_spec(self):
        bounds = dict(DEFAULT_BOUNDS)
        for key, value in self.values.items():
            if key.startswith("cohort."):
                if len(value) != 2:
                    raise ConfigError(f"{key}: bounds need exactly two numbers")
                bounds[key[len("cohort."):]] = tuple(float(v) for v in value)
        return CohortSpec(bounds=bounds, n_patients=self["n_patients"], days=self["days"], seed=self.seed,
                          coupling=self["coupling"])

    def policy_spec(self):
        kw = {}
        for key, value in self.values.items():
            if key.startswith("policy."):
                name = key[len("policy."):]
                kw[name] = tuple(value) if isinstance(value, list) else value
        try:
            return PolicySpec(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def preset(self, name):
        overrides = {}
        for key, value in self.values.items():
            head, _, tail = key.partition(".")
            if head == f"fidelity:{name}":
                overrides[tail] = value
        return fidelity.get_preset(name, **overrides)

    def encoder_spec(self):
        return encoders.EncoderSpec(
            encoders.KernelSpec(self["encoder.iob_tau"]), encoders.KernelSpec(self["encoder.cob_tau"]),
            self["encoder.f_bio"],
        )

    def family(self, **overrides):
        kw = {k[len("model."):]: v for k, v in self.values.items() if k.startswith("model.") and k != "model.family"}
        kw.update(overrides)
        kind = kw.pop("kind", self["model.family"])
        return fc.ModelFamily(kind=kind, **kw)

    def pair_spec(self, encoding=None, family=None):
        tod = self["features.tod_in_base"]
        C, stride = self["features.context"], self["features.lag_stride"]
        return bench.PairSpec(
            family or self.family(),
            fc.univariate_spec(tod, C, stride),
            fc.multivariate_spec(encoding or self["features.encoding"], tod, C, stride),
        )

    def task(self, horizons=None):
        return bench.ForecastTask(
            tuple(horizons or self["task.horizons"]), self["task.loss"], self["task.split"], self["task.train_frac"],
            self["features.context"], self["task.stride"],
        )

    def probe_spec(self):
        return ProbeSpec(
            tuple(self["probe.dose_grid"]), tuple(self["probe.carb_grid"]), self["probe.insulin_horizon"],
            self["probe.carb_horizon"], self["probe.tolerance"], self["probe.anchors_per_patient"],
        )

    def semantic(self):
        return {k: v for k, v in sorted(self.values.items()) if k not in NON_SEMANTIC}

    def config_hash(self):
        blob = json.dumps(self.semantic(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def conventions(self):
        return {
            "time_of_day": "univariate_base" if self["features.tod_in_base"] else "driver",
            "loss": self["task.loss"],
            "split": self["task.split"],
        }

    def validate(self):
        for name in [self["preset"]] + list(self["presets"]):
            self.preset(name)
        self.cohort_spec().check_heterogeneity()
        self.policy_spec()
        self.family()
        self.pair_spec()
        self.task()
        self.probe_spec()
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self["features.encoding"] not in ("encoded", "raw"):
            raise ConfigError("features.encoding: must be 'encoded' or 'raw'")
        return self


def build_config(file_values=None, environ=None, **cli):
    """Merge defaults < file < environment < CLI flags, then type-check."""
    merged = {k: d for k, (_, d) in SCHEMA.items()}
    layers = [flatten(file_values or {}), env_overrides(environ), {k: v for k, v in cli.items() if v is not None}]
    for layer in layers:
        for key, value in layer.items():
            merged[key] = _coerce(key, value, _kind_for(key))
    if merged.get("seed") is None:
        raise ConfigError("seed: a master seed is mandatory (no wall-clock seeding)")
    try:
        return RunConfig(merged).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, environ=None, **cli):
    values = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(values, environ, **cli)
