"""Report files: deterministic JSON/CSV writers and their JSON schemas.

Column order of ``delta_report.csv``:
``horizon_min,l_uni,l_multi,delta,pct,ci_low,ci_high,n_windows,n_episodes,preset,config_hash,seed,time_of_day``.
``sweep.csv`` starts with ``noise_level,horizon_min,l_uni,l_multi,delta,pct,ci_low,ci_high,n`` and appends
``config_hash,seed,time_of_day``. Floats are written with ``repr`` so files round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import jsonschema

from .errors import ReportIncomplete, ValidationError

DELTA_COLUMNS = ("horizon_min", "l_uni", "l_multi", "delta", "pct", "ci_low", "ci_high", "n_windows", "n_episodes")
SWEEP_COLUMNS = ("noise_level", "horizon_min", "l_uni", "l_multi", "delta", "pct", "ci_low", "ci_high", "n")
META_COLUMNS = ("config_hash", "seed", "time_of_day")

_number = {"type": "number"}
_rate = {"type": "number", "minimum": 0, "maximum": 1}
_meta = {
    "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    "seed": {"type": "integer"},
    "conventions": {
        "type": "object",
        "required": ["time_of_day", "loss", "split"],
        "properties": {
            "time_of_day": {"enum": ["univariate_base", "driver"]},
            "loss": {"enum": ["RMSE", "MAE"]},
            "split": {"enum": ["within_subject", "cross_subject"]},
        },
    },
}
_delta_row = {
    "type": "object",
    "required": list(DELTA_COLUMNS),
    "properties": {
        "horizon_min": {"type": "integer", "minimum": 1},
        "l_uni": {"type": "number", "minimum": 0},
        "l_multi": {"type": "number", "minimum": 0},
        "delta": _number,
        "pct": _number,
        "ci_low": _number,
        "ci_high": _number,
        "n_windows": {"type": "integer", "minimum": 1},
        "n_episodes": {"type": "integer", "minimum": 2},
    },
}
_attribution = {
    "type": "object",
    "required": ["shares", "increases", "residual", "base_loss", "repeats"],
    "properties": {
        "shares": {"type": "object", "additionalProperties": _rate},
        "increases": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0}},
        "residual": _rate,
        "base_loss": _number,
        "repeats": {"type": "integer", "minimum": 1},
    },
}

DELTA_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "delta_report.json",
    "type": "object",
    "required": ["schema", "config_hash", "seed", "conventions", "preset", "family", "encoding", "rows",
                 "attribution"],
    "properties": {
        "schema": {"const": "driverlens/delta-report/1"},
        **_meta,
        "preset": {"type": "string"},
        "family": {"type": "string"},
        "encoding": {"enum": ["encoded", "raw"]},
        "rows": {"type": "array", "minItems": 1, "items": _delta_row},
        "attribution": {"type": "object", "additionalProperties": _attribution},
        "subject_split": {"type": "object"},
    },
}

SWEEP_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "sweep.json",
    "type": "object",
    "required": ["schema", "config_hash", "seed", "conventions", "family", "encoding", "levels"],
    "properties": {
        "schema": {"const": "driverlens/sweep/1"},
        **_meta,
        "family": {"type": "string"},
        "encoding": {"enum": ["encoded", "raw"]},
        "levels": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["noise_level", "rows", "attribution"],
                "properties": {
                    "noise_level": {"type": "string"},
                    "rows": {"type": "array", "minItems": 1, "items": _delta_row},
                    "attribution": _attribution,
                },
            },
        },
    },
}

_probe_model = {
    "type": "object",
    "required": ["model_name", "monotonicity_violation_rate", "insensitive", "ranking_error", "ranking_penalty",
                 "n_pairs", "per_scenario"],
    "properties": {
        "model_name": {"type": "string"},
        "monotonicity_violation_rate": _rate,
        "insensitive": {"type": "boolean"},
        "ranking_error": _rate,
        "ranking_penalty": {"type": "number", "minimum": 0},
        "n_pairs": {"type": "integer", "minimum": 1},
        "per_scenario": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scenario", "probe_horizon_min", "n_pairs", "ranking_error"],
                "properties": {
                    "scenario": {"enum": ["insulin", "carbs"]},
                    "probe_horizon_min": {"type": "integer"},
                    "n_pairs": {"type": "integer", "minimum": 1},
                    "ranking_error": _rate,
                },
            },
        },
    },
}

PROBE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "probe_report.json",
    "type": "object",
    "required": ["schema", "config_hash", "seed", "conventions", "preset", "family", "models", "baselines"],
    "properties": {
        "schema": {"const": "driverlens/probe-report/1"},
        **_meta,
        "preset": {"type": "string"},
        "family": {"type": "string"},
        "probe": {"type": "object"},
        "models": {"type": "array", "minItems": 1, "items": _probe_model},
        "baselines": {"type": "object", "additionalProperties": _rate},
    },
}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "manifest.json",
    "type": "object",
    "required": ["schema", "sim_hash", "seed", "data_hash", "episodes"],
    "properties": {
        "schema": {"const": "driverlens/manifest/1"},
        "sim_hash": {"type": "string"},
        "seed": {"type": "integer"},
        "data_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "episodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["patient_id", "stem", "hash", "params"],
                "properties": {"params": {"type": "object"}},
            },
        },
    },
}

SCHEMAS = {
    "delta_report.json": DELTA_SCHEMA,
    "sweep.json": SWEEP_SCHEMA,
    "probe_report.json": PROBE_SCHEMA,
    "manifest.json": MANIFEST_SCHEMA,
}


def validate(obj, schema):
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"report does not match schema at {where}: {exc.message}", field=where) from None


def dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_json(path, obj, schema=None):
    if schema is not None:
        validate(obj, schema)
    return write_text(path, dumps(obj))


def read_json(path, schema=None):
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed JSON ({exc})") from None
    if schema is not None:
        validate(obj, schema)
    return obj


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def require_rows(rows, horizons, label="report"):
    """Guard against silently missing horizons."""
    have = {int(r["horizon_min"]) for r in rows}
    missing = sorted(set(int(h) for h in horizons) - have)
    if missing:
        raise ReportIncomplete(f"{label} incomplete: no rows for horizons {missing}")


def delta_csv(report):
    meta = {"config_hash": report["config_hash"], "seed": report["seed"],
            "time_of_day": report["conventions"]["time_of_day"], "preset": report["preset"]}
    rows = [dict(r, **meta) for r in report["rows"]]
    return csv_text(DELTA_COLUMNS + ("preset",) + META_COLUMNS, rows)


def sweep_csv(report):
    meta = {"config_hash": report["config_hash"], "seed": report["seed"],
            "time_of_day": report["conventions"]["time_of_day"]}
    rows = []
    for level in report["levels"]:
        for r in level["rows"]:
            rows.append(dict(r, noise_level=level["noise_level"], n=r["n_windows"], **meta))
    return csv_text(SWEEP_COLUMNS + META_COLUMNS, rows)


def attribution_dict(report):
    return {
        "shares": {k: float(v) for k, v in report.shares.items()},
        "increases": {k: float(v) for k, v in report.increases.items()},
        "residual": float(report.residual),
        "base_loss": float(report.base_loss),
        "repeats": int(report.repeats),
    }
