"""End-to-end runs: simulate, degrade, encode, train, bench and probe.

Independent per-patient (or per-level) tasks go to a bounded process pool
whose results come back in submission order; every file is written by the
parent process. Outputs therefore do not depend on ``workers``.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

from . import bench, plots, reports
from . import probe as probemod
from . import rng as rngmod
from .errors import ConfigError, ReportIncomplete, ValidationError
from .physio import MINUTES_PER_DAY, PatientParams, SimConfig, params_dict, sample_cohort
from .policy import simulate_with_policy
from .timeline import episode_hash, extract_windows, load_episode, save_episode

EPISODE_DIR = "episodes"
MANIFEST = "manifest.json"


def parallel_map(fn, items, workers=1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def _digest(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def patient_id(index):
    return f"p{index:03d}"


# ------------------------------------------------------------- simulate


def sim_settings(cfg):
    """The configuration keys the simulated cohort depends on."""
    keep = {"seed", "n_patients", "days", "coupling"}
    return {k: v for k, v in cfg.semantic().items() if k in keep or k.startswith(("cohort.", "policy."))}


def _simulate_one(job, policy_spec, days, seed):
    index, params = job
    sim = SimConfig(duration_min=days * MINUTES_PER_DAY, master_seed=seed, patient_index=index)
    return simulate_with_policy(params, policy_spec, days, rngmod.stream(seed, index, "policy"), sim,
                                patient_id=patient_id(index))


def simulate_cohort(cohort_spec, policy_spec, seed, workers=1):
    """Sample the cohort and simulate every patient; returns ``(episodes, params)``."""
    params = sample_cohort(cohort_spec, seed)
    job = partial(_simulate_one, policy_spec=policy_spec, days=cohort_spec.days, seed=seed)
    return parallel_map(job, list(enumerate(params)), workers), params


def _writable(path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"out: cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"out: output directory {path} is not writable")
    return path


def run_simulate(cfg):
    """Simulate the cohort and write episodes plus ``manifest.json``."""
    root = _writable(Path(cfg.out) / EPISODE_DIR)
    episodes, params = simulate_cohort(cfg.cohort_spec(), cfg.policy_spec(), cfg.seed, cfg.workers)
    entries = []
    for ep, p in zip(episodes, params):
        save_episode(ep, root / ep.patient_id)
        entries.append({"patient_id": ep.patient_id, "stem": ep.patient_id, "hash": episode_hash(ep),
                        "params": params_dict(p)})
    settings = sim_settings(cfg)
    manifest = {
        "schema": "driverlens/manifest/1",
        "sim_hash": _digest(settings),
        "seed": cfg.seed,
        "settings": settings,
        "data_hash": _digest({"settings": settings, "episodes": entries}),
        "episodes": entries,
    }
    reports.write_json(root / MANIFEST, manifest, reports.MANIFEST_SCHEMA)
    return manifest


def load_cohort(root):
    """Episodes and parameters listed in a manifest, re-hashed on load."""
    root = Path(root)
    manifest = reports.read_json(root / MANIFEST, reports.MANIFEST_SCHEMA)
    episodes, params = [], []
    for entry in manifest["episodes"]:
        ep = load_episode(root / entry["stem"], entry["patient_id"])
        if episode_hash(ep) != entry["hash"]:
            raise ValidationError(f"episode {entry['patient_id']} does not match its manifest hash")
        episodes.append(ep)
        params.append(PatientParams(**entry["params"]))
    return manifest, episodes, params


def ensure_episodes(cfg):
    """Reuse episodes on disk when they match the config, else simulate.

    Runs always continue from the files on disk, so a fresh simulation and
    a reused one feed identical bytes downstream.
    """
    root = Path(cfg.out) / EPISODE_DIR
    path = root / MANIFEST
    fresh = True
    if path.exists():
        try:
            manifest = reports.read_json(path, reports.MANIFEST_SCHEMA)
            fresh = manifest["sim_hash"] != _digest(sim_settings(cfg))
        except ValidationError:
            fresh = True
    if fresh:
        run_simulate(cfg)
    _, episodes, params = load_cohort(root)
    return episodes, params


# ------------------------------------------------------------ training


def _header(cfg, schema):
    return {"schema": schema, "config_hash": cfg.config_hash(), "seed": cfg.seed, "conventions": cfg.conventions()}


def _causal_pairs(cfg, family, observed, truth, params, task, spec):
    """Training-side intervention rows for the mlp ranking penalty, or None."""
    if family.kind != "mlp" or family.causal_weight <= 0:
        return None
    pspec = cfg.probe_spec()
    needed = {pspec.insulin_horizon_min, pspec.carb_horizon_min}
    if not needed <= set(task.horizons_min):
        raise ConfigError(f"model.causal_weight > 0 needs task horizons covering the probe horizons {sorted(needed)}")
    train, _ = bench.split_episodes(observed, task)
    true_train, _ = bench.split_episodes(truth, task)
    pairs = probemod.generate_pairs(train, [e.events for e in true_train], params, pspec, cfg.seed,
                                    task.context)
    return probemod.causal_pairs_for(spec, pairs, task.horizon_points, cfg.encoder_spec(), task.step_min)


def _train_level(cfg, episodes, params, level, task, encoding=None):
    observed = bench.degrade_cohort(episodes, cfg.preset(level), cfg.seed)
    pair_spec = cfg.pair_spec(encoding)
    causal = _causal_pairs(cfg, pair_spec.family, observed, episodes, params, task, pair_spec.multi)
    run = bench.run_pair(pair_spec, observed, task, cfg.encoder_spec(), cfg.seed, cfg["bootstrap.B"], causal)
    return observed, run


def _attribution(cfg, model, dm, name, task):
    gen = rngmod.stream(cfg.seed, 0, "attribution:" + name)
    rep = bench.permutation_importance(model, dm, R=cfg["attribution.repeats"], rng=gen, loss=task.loss)
    return reports.attribution_dict(rep)


# ---------------------------------------------------------------- bench


def bench_report(cfg, episodes, params):
    task = cfg.task()
    _, run = _train_level(cfg, episodes, params, cfg["preset"], task)
    rows = [r.as_dict() for r in run.rows]
    reports.require_rows(rows, task.horizons_min, "delta report")
    report = _header(cfg, "driverlens/delta-report/1")
    report.update({
        "preset": cfg["preset"],
        "family": cfg["model.family"],
        "encoding": cfg["features.encoding"],
        "rows": rows,
        "attribution": {
            "uni": _attribution(cfg, run.pair.uni, run.test_matrix, "uni", task),
            "multi": _attribution(cfg, run.pair.multi, run.test_matrix, "multi", task),
        },
    })
    if len(episodes) >= 4:
        observed = bench.degrade_cohort(episodes, cfg.preset(cfg["preset"]), cfg.seed)
        ss = bench.subject_split_eval(cfg.family(), cfg.pair_spec().multi, observed, task, cfg.encoder_spec(),
                                      cfg.seed, cfg["bootstrap.B"])
        report["subject_split"] = {
            "horizon_min": ss.horizon_min, "within": ss.within, "cross": ss.cross, "ratio": ss.ratio,
            "ci_low": ss.ci_low, "ci_high": ss.ci_high, "n_patients": ss.n_patients,
            "per_horizon": {str(h): v for h, v in ss.per_horizon.items()},
        }
    return report


def run_bench(cfg):
    out = _writable(Path(cfg.out))
    episodes, params = ensure_episodes(cfg)
    report = bench_report(cfg, episodes, params)
    reports.write_json(out / "delta_report.json", report, reports.DELTA_SCHEMA)
    reports.write_text(out / "delta_report.csv", reports.delta_csv(report))
    plots.render_delta_vs_horizon(report, out / "delta_vs_horizon.svg")
    plots.render_attribution(report, None, out / "attribution_shares.svg")
    return report


# ---------------------------------------------------------------- sweep


def _sweep_level(level, cfg, episodes, params):
    task = cfg.task()
    _, run = _train_level(cfg, episodes, params, level, task)
    rows = [r.as_dict() for r in run.rows]
    reports.require_rows(rows, task.horizons_min, f"sweep level {level}")
    return {"noise_level": level, "rows": rows,
            "attribution": _attribution(cfg, run.pair.multi, run.test_matrix, "multi", task)}


def sweep_report(cfg, episodes, params):
    levels = list(cfg["presets"])
    if not levels:
        raise ConfigError("presets: a sweep needs at least one noise level")
    job = partial(_sweep_level, cfg=cfg, episodes=episodes, params=params)
    report = _header(cfg, "driverlens/sweep/1")
    report.update({"family": cfg["model.family"], "encoding": cfg["features.encoding"],
                   "levels": parallel_map(job, levels, cfg.workers)})
    return report


def run_sweep(cfg):
    out = _writable(Path(cfg.out))
    episodes, params = ensure_episodes(cfg)
    report = sweep_report(cfg, episodes, params)
    reports.write_json(out / "sweep.json", report, reports.SWEEP_SCHEMA)
    reports.write_text(out / "sweep.csv", reports.sweep_csv(report))
    plots.render_delta_vs_noise(report, out / "delta_vs_noise.svg")
    return report


# ---------------------------------------------------------------- probe


def _pairs_for_patient(job, spec, seed, context):
    index, episode, events, params = job
    return probemod.generate_pairs([episode], [events], [params], spec, seed, context, patient_indices=[index])


def probe_task(cfg):
    pspec = cfg.probe_spec()
    horizons = set(cfg["task.horizons"]) | {pspec.insulin_horizon_min, pspec.carb_horizon_min}
    return cfg.task(sorted(horizons))


def probe_report(cfg, episodes, params):
    task = probe_task(cfg)
    pspec = cfg.probe_spec()
    enc = cfg.encoder_spec()
    observed, run = _train_level(cfg, episodes, params, cfg["preset"], task)
    _, test = bench.split_episodes(observed, task)
    _, true_test = bench.split_episodes(episodes, task)
    index = {ep.patient_id: i for i, ep in enumerate(episodes)}
    jobs = [(index[ep.patient_id], ep, tr.events, params[index[ep.patient_id]]) for ep, tr in zip(test, true_test)]
    job = partial(_pairs_for_patient, spec=pspec, seed=cfg.seed, context=task.context)
    pairs = [p for chunk in parallel_map(job, jobs, cfg.workers) for p in chunk]
    if not pairs:
        raise ReportIncomplete("probe produced no intervention pairs; lengthen the episodes")
    step = task.step_min
    windows = [w for ep in test
               for w in extract_windows(ep, task.context, (pspec.insulin_horizon_min // step,), stride=97)]
    models = [
        probemod.probe_model(run.pair.multi, pairs, windows, pspec, enc, name="multi").as_dict(),
        probemod.probe_model(run.pair.uni, pairs, windows, pspec, enc, name="uni").as_dict(),
    ]
    baselines = {
        "oracle": probemod.treatment_ranking_error(probemod.SimulatorPredictor(pspec.warmup_min), pairs),
        "random": probemod.treatment_ranking_error(probemod.RandomPredictor(cfg.seed), pairs),
    }
    report = _header(cfg, "driverlens/probe-report/1")
    report.update({
        "preset": cfg["preset"], "family": cfg["model.family"],
        "probe": {"dose_grid": list(pspec.dose_grid), "carb_grid": list(pspec.carb_grid),
                  "insulin_horizon_min": pspec.insulin_horizon_min, "carb_horizon_min": pspec.carb_horizon_min,
                  "tolerance": pspec.tolerance, "n_pairs": len(pairs)},
        "models": models,
        "baselines": baselines,
    })
    return report, pairs


def run_probe(cfg):
    out = _writable(Path(cfg.out))
    episodes, params = ensure_episodes(cfg)
    report, pairs = probe_report(cfg, episodes, params)
    reports.write_json(out / "probe_report.json", report, reports.PROBE_SCHEMA)
    reports.write_text(out / "probe_pairs.jsonl", "".join(json.dumps(p.to_json(), sort_keys=True) + "\n"
                                                          for p in pairs))
    return report


# --------------------------------------------------------------- report


def run_report(cfg):
    """Re-render every plot from the report files already in ``out``."""
    out = Path(cfg.out)
    delta_path, sweep_path = out / "delta_report.json", out / "sweep.json"
    if not delta_path.exists() and not sweep_path.exists():
        raise ReportIncomplete(f"no reports in {out}; run 'bench' and/or 'sweep' first")
    written = []
    delta = reports.read_json(delta_path, reports.DELTA_SCHEMA) if delta_path.exists() else None
    sweep = reports.read_json(sweep_path, reports.SWEEP_SCHEMA) if sweep_path.exists() else None
    if delta is not None:
        written.append(plots.render_delta_vs_horizon(delta, out / "delta_vs_horizon.svg"))
    if sweep is not None:
        written.append(plots.render_delta_vs_noise(sweep, out / "delta_vs_noise.svg"))
    written.append(plots.render_attribution(delta, sweep, out / "attribution_shares.svg"))
    return written


def run_all(cfg):
    run_bench(cfg)
    run_sweep(cfg)
    run_probe(cfg)
    return run_report(cfg)


__all__ = [
    "parallel_map", "simulate_cohort", "run_simulate", "load_cohort", "ensure_episodes", "bench_report", "run_bench",
    "sweep_report", "run_sweep", "probe_report", "run_probe", "run_report", "run_all",
]
