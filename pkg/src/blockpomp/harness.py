"""Command implementations: simulate, filter, learn, evaluate, bound, compare.

Every command derives all randomness from one master seed through labeled
streams, so rerunning with the same config and seed reproduces every output
byte. Learning replicates draw their initial parameter swarms on streams
keyed only by (seed, replicate), never by algorithm, so competing algorithms
start from identical draws within a replicate; the draws' digests are logged
for audit.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io as bio
from .config import ConfigError, ModelBundle, build_bundle
from .filters import bpf_run, enkf_run, pf_run, simulate
from .learning import (
    CoolingSchedule,
    PerturbationKernel,
    evaluate_metrics,
    ibpf_run,
    ienkf_run,
    if2_run,
)
from .model import ObservationSeries, ParameterSwarm, UnitParameterField
from .oracles import BoundInputs, bound_calculator
from .rng import LEARN, RngNode, SWARM

_OWN_METRIC = {"ibpf": "bpf", "if2": "pf", "ienkf": "enkf"}
_METRIC_LABELS = bio.METRIC_LABELS


def _root(cfg: dict) -> RngNode:
    return RngNode(int(cfg["seed"]))


def _load_dataset(cfg: dict, bundle: ModelBundle) -> ObservationSeries:
    path = cfg.get("dataset")
    if not path:
        raise ConfigError("this command requires config key 'dataset' (a cases CSV path)")
    data, names = bio.read_cases_csv(path, t0=bundle.t0)
    if tuple(names) != tuple(bundle.city_names):
        raise bio.SchemaError(
            f"{path}: cities {list(names)} do not match the configured model "
            f"{list(bundle.city_names)}")
    return data


def _load_theta(cfg: dict, bundle: ModelBundle) -> UnitParameterField:
    if cfg.get("params"):
        return bio.read_params_json(cfg["params"], bundle.model.layout, bundle.city_names)
    if bundle.truth is None:
        raise ConfigError("config key 'params' is required: the configured model "
                          "supplies no generating values")
    return bundle.truth


def _usable_metrics(cfg: dict, bundle: ModelBundle, notes: list) -> tuple:
    metrics = tuple(cfg["eval_metrics"])
    if "enkf" in metrics and bundle.model.emeasure_unit is None:
        notes.append("enkf metric dropped: model supplies no emeasure_unit")
        metrics = tuple(m for m in metrics if m != "enkf")
    return metrics


def _boxes_for_layout(cfg: dict, layout) -> dict:
    names = list(layout.unit_names) + list(layout.shared_names)
    missing = [n for n in names if n not in cfg["boxes"]]
    if missing:
        raise ConfigError(f"no initial-search box configured for parameters {missing}")
    return {n: (float(cfg["boxes"][n][0]), float(cfg["boxes"][n][1])) for n in names}


def _kernel_for_layout(cfg: dict, layout) -> PerturbationKernel:
    names = set(layout.unit_names) | set(layout.shared_names)
    scales = {k: float(v) for k, v in cfg["perturb_scales"].items() if k in names}
    return PerturbationKernel(layout, scales)


# ---------------------------------------------------------------------------
# simulate


def run_simulate(cfg: dict, out_dir: str) -> dict:
    root = _root(cfg)
    bundle = build_bundle(cfg, root)
    theta = _load_theta(cfg, bundle)
    data, latent = simulate(bundle.model, bundle.graph, bundle.times, theta, root,
                            t0=bundle.t0)
    os.makedirs(out_dir, exist_ok=True)
    cases_path = os.path.join(out_dir, "cases.csv")
    latent_path = os.path.join(out_dir, "latent.csv")
    params_path = os.path.join(out_dir, "params_truth.json")
    bio.write_cases_csv(cases_path, data, bundle.city_names)
    bio.write_latent_csv(latent_path, data.times, latent, bundle.state_columns)
    bio.write_params_json(params_path, bundle.truth_full or theta, bundle.city_names)
    summary = {
        "schema": "v1", "command": "simulate", "model": bundle.name,
        "seed": int(cfg["seed"]), "cities": len(bundle.city_names),
        "n_time": data.n_time, "rows": data.n_time * len(bundle.city_names),
        "files": {"cases": cases_path, "latent": latent_path, "params": params_path},
    }
    bio.write_json(os.path.join(out_dir, "run.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# filter


def run_filter(cfg: dict, out_dir: str) -> dict:
    root = _root(cfg)
    bundle = build_bundle(cfg, root)
    data = _load_dataset(cfg, bundle)
    theta = _load_theta(cfg, bundle)
    alg = cfg["algorithm"]
    j = int(cfg["J"])
    if alg == "pf":
        out = pf_run(bundle.model, bundle.graph, data, theta, j, root,
                     resampler=cfg["resampler"])
    elif alg == "bpf":
        out = bpf_run(bundle.model, bundle.graph, data, theta, j, root,
                      partition=bundle.partition, resampler=cfg["resampler"])
    elif alg == "enkf":
        out = enkf_run(bundle.model, bundle.graph, data, theta, j, root)
    else:
        raise ConfigError(f"filter algorithm must be one of pf, bpf, enkf, got {alg!r}")
    os.makedirs(out_dir, exist_ok=True)
    record_path = os.path.join(out_dir, "filter.csv")
    steps_path = os.path.join(out_dir, "filter_steps.csv")
    bio.write_filter_csv(record_path, alg, out, j)
    bio.write_filter_steps_csv(steps_path, data.times, out, bundle.state_columns)
    summary = {
        "schema": "v1", "command": "filter", "model": bundle.name, "algorithm": alg,
        "seed": int(cfg["seed"]), "J": j, "loglik": out.loglik,
        "degenerate_cells": out.degenerate_cells,
        "files": {"record": record_path, "steps": steps_path},
    }
    bio.write_json(os.path.join(out_dir, "run.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# learn


def _learn_replicate(cfg: dict, rep: int) -> dict:
    """One learning replicate, self-contained so worker processes can run it."""
    root = _root(cfg)
    bundle = build_bundle(cfg, root)
    data = _load_dataset(cfg, bundle)
    layout = bundle.model.layout
    swarm0 = ParameterSwarm.from_boxes(layout, _boxes_for_layout(cfg, layout),
                                       int(cfg["J"]), bundle.graph.n_vertices,
                                       root.child(SWARM, rep))
    digest = hashlib.sha256(swarm0.unit.tobytes() + swarm0.shared.tobytes()).hexdigest()[:16]
    base = {"replicate": rep, "digest": digest, "own_value": float("nan"),
            "inpass_loglik": float("nan"), "degenerate_cells": 0, "error": "",
            "trace": (), "swarm_unit": None, "swarm_shared": None}
    kernel = _kernel_for_layout(cfg, layout)
    cooling = CoolingSchedule(float(cfg["cooling"]["sigma0"]), float(cfg["cooling"]["rate"]))
    alg = cfg["algorithm"]
    node = root.child(LEARN, rep)
    try:
        if alg == "ibpf":
            result = ibpf_run(bundle.model, bundle.graph, data, swarm0, node,
                              int(cfg["M"]), cooling, kernel, partition=bundle.partition,
                              resampler=cfg["resampler"])
        elif alg == "if2":
            result = if2_run(bundle.model, bundle.graph, data, swarm0, node,
                             int(cfg["M"]), cooling, kernel, resampler=cfg["resampler"])
        elif alg == "ienkf":
            result = ienkf_run(bundle.model, bundle.graph, data, swarm0, node,
                               int(cfg["M"]), cooling, kernel)
        else:
            raise ConfigError(f"unknown learning algorithm {alg!r}")
        own = _OWN_METRIC[alg]
        point = result.swarm.mean_field()
        sel = evaluate_metrics(bundle.model, bundle.graph, data, point, int(cfg["J"]),
                               node, replicates=int(cfg["selection_replicates"]),
                               partition=bundle.partition, metrics=(own,),
                               resampler=cfg["resampler"])
        own_value = sel[own].mean
        base.update(inpass_loglik=result.loglik, degenerate_cells=result.degenerate_cells,
                    trace=result.trace, swarm_unit=result.swarm.unit,
                    swarm_shared=result.swarm.shared)
        if np.isfinite(own_value):
            base.update(status="ok", own_value=float(own_value))
        else:
            base.update(status="failed", error="non-finite own-metric log-likelihood")
    except Exception as e:  # noqa: BLE001 - a replicate failure is data, not a crash
        base.update(status="failed", error=f"{type(e).__name__}: {e}")
    return base


def run_learn(cfg: dict, out_dir: str) -> dict:
    root = _root(cfg)
    bundle = build_bundle(cfg, root)
    data = _load_dataset(cfg, bundle)  # fail fast on dataset problems before spawning work
    alg = cfg["algorithm"]
    if alg not in _OWN_METRIC:
        raise ConfigError(f"learning algorithm must be one of {sorted(_OWN_METRIC)}, got {alg!r}")
    if alg == "ienkf" and bundle.model.emeasure_unit is None:
        raise ConfigError("ienkf requires a model with emeasure_unit")
    notes: list = []
    metrics = _usable_metrics(cfg, bundle, notes)
    replicates = int(cfg["replicates"])
    threads = int(cfg["threads"])
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_learn_replicate, cfg, rep) for rep in range(replicates)]
            results = [f.result() for f in futures]
    else:
        results = [_learn_replicate(cfg, rep) for rep in range(replicates)]

    os.makedirs(out_dir, exist_ok=True)
    own_label = _METRIC_LABELS[_OWN_METRIC[alg]]
    rep_rows = []
    for r in results:
        own_cell = "Failed" if r["status"] == "failed" else r["own_value"]
        rep_rows.append((r["replicate"], r["status"], own_label, own_cell,
                         r["inpass_loglik"], r["degenerate_cells"], r["digest"],
                         r["error"]))
        if r["trace"]:
            bio.write_trace_csv(os.path.join(out_dir, f"trace_rep{r['replicate']}.csv"),
                                r["trace"])
    replicates_path = os.path.join(out_dir, "replicates.csv")
    bio.write_csv(replicates_path,
                  ("replicate", "status", "own_metric", "own_loglik", "inpass_loglik",
                   "degenerate_cells", "init_digest", "error"), rep_rows)

    ok = [r for r in results if r["status"] == "ok"]
    files = {"replicates": replicates_path}
    summary = {
        "schema": "v1", "command": "learn", "model": bundle.name,
        "case": cfg["case"] if bundle.name == "measles" else None,
        "algorithm": alg, "own_metric": own_label,
        "cities": len(bundle.city_names), "J": int(cfg["J"]), "M": int(cfg["M"]),
        "replicates": replicates, "seed": int(cfg["seed"]),
        "learned_parameter_count": bundle.model.layout.learned_count(bundle.graph.n_vertices),
        "initial_draw_digests": [r["digest"] for r in results],
        "notes": notes, "files": files,
    }
    if not ok:
        summary.update(status="failed", best_replicate=None)
        bio.write_json(os.path.join(out_dir, "run.json"), summary)
        return summary

    best = max(ok, key=lambda r: r["own_value"])
    swarm = ParameterSwarm(bundle.model.layout, best["swarm_unit"], best["swarm_shared"],
                           iteration=int(cfg["M"]))
    point = swarm.mean_field()
    eval_results = evaluate_metrics(bundle.model, bundle.graph, data, point,
                                    int(cfg["J"]), root,
                                    replicates=int(cfg["eval_replicates"]),
                                    partition=bundle.partition, metrics=metrics,
                                    resampler=cfg["resampler"])
    trace_path = os.path.join(out_dir, "trace.csv")
    swarm_path = os.path.join(out_dir, "swarm.json")
    params_path = os.path.join(out_dir, "params_best.json")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    bio.write_trace_csv(trace_path, best["trace"])
    bio.write_swarm_json(swarm_path, swarm, bundle.city_names)
    bio.write_params_json(params_path, point, bundle.city_names)
    bio.write_metrics_csv(metrics_path, eval_results, int(cfg["J"]))
    files.update(trace=trace_path, swarm=swarm_path, params=params_path,
                 metrics=metrics_path)
    summary.update(status="ok", best_replicate=best["replicate"],
                   best_own_loglik=best["own_value"],
                   metrics={m: {"raw": res.mean, "se": res.se, "normalized": res.normalized}
                            for m, res in eval_results.items()})
    bio.write_json(os.path.join(out_dir, "run.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# evaluate


def run_evaluate(cfg: dict, out_dir: str) -> dict:
    root = _root(cfg)
    bundle = build_bundle(cfg, root)
    data = _load_dataset(cfg, bundle)
    theta = _load_theta(cfg, bundle)
    notes: list = []
    metrics = _usable_metrics(cfg, bundle, notes)
    results = evaluate_metrics(bundle.model, bundle.graph, data, theta, int(cfg["J"]),
                               root, replicates=int(cfg["eval_replicates"]),
                               partition=bundle.partition, metrics=metrics,
                               resampler=cfg["resampler"])
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, "metrics.csv")
    bio.write_metrics_csv(metrics_path, results, int(cfg["J"]))
    summary = {
        "schema": "v1", "command": "evaluate", "model": bundle.name,
        "seed": int(cfg["seed"]), "J": int(cfg["J"]),
        "replicates": int(cfg["eval_replicates"]),
        "cities": len(bundle.city_names), "n_time": data.n_time,
        "metrics": {m: {"raw": r.mean, "se": r.se, "normalized": r.normalized}
                    for m, r in results.items()},
        "notes": notes, "files": {"metrics": metrics_path},
    }
    bio.write_json(os.path.join(out_dir, "run.json"), summary)
    return summary


# ---------------------------------------------------------------------------
# bound


def run_bound(inputs: BoundInputs, out_dir=None) -> dict:
    report = bound_calculator(inputs)
    doc = {
        "schema": "v1", "command": "bound",
        "inputs": {
            "eps_x": inputs.eps_x, "eps_y": inputs.eps_y, "eps_theta": inputs.eps_theta,
            "max_neighborhood": inputs.max_neighborhood,
            "max_interacting_blocks": inputs.max_interacting_blocks,
            "max_block_size": inputs.max_block_size, "radius": inputs.radius,
            "n_particles": inputs.n_particles,
            "dist_to_boundary": inputs.dist_to_boundary,
            "card_target": inputs.card_target,
        },
        "report": report.as_dict(),
    }
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        bio.write_json(os.path.join(out_dir, "bound.json"), doc)
    return doc


# ---------------------------------------------------------------------------
# compare


def _compare_cell(run_dir) -> dict:
    """Returns {metric label: display string} for one run directory."""
    if not run_dir:
        return {}
    metrics_path = os.path.join(run_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        table = bio.read_metrics_csv(metrics_path)
        return {label: rec["raw"] for label, rec in table.items()}
    run_path = os.path.join(run_dir, "run.json")
    if os.path.exists(run_path) and bio.read_json(run_path).get("status") == "failed":
        return {"lE": "Failed", "lP": "Failed", "lB": "Failed"}
    return {}


def run_compare(cfg: dict, out_dir: str) -> dict:
    spec = cfg.get("compare")
    if not isinstance(spec, dict) or "rows" not in spec:
        raise ConfigError("compare requires config key 'compare' with a 'rows' list; "
                          "each row: {cities, cells: {algorithm: run dir}, truth: run dir}")
    rows_spec = spec["rows"]
    algorithms = spec.get("algorithms")
    if not algorithms:
        algorithms = []
        for row in rows_spec:
            for alg in row.get("cells", {}):
                if alg not in algorithms:
                    algorithms.append(alg)
    labels = ("lE", "lP", "lB")
    header = ["cities"]
    for alg in algorithms:
        header += [f"{alg}_{lbl}" for lbl in labels]
    header += [f"truth_{lbl}" for lbl in labels]
    rows = []
    for row_spec in rows_spec:
        row = [row_spec.get("cities", "NA")]
        for alg in algorithms:
            cell = _compare_cell(row_spec.get("cells", {}).get(alg))
            row += [cell.get(lbl, "NA") for lbl in labels]
        truth_cell = _compare_cell(row_spec.get("truth"))
        row += [truth_cell.get(lbl, "NA") for lbl in labels]
        rows.append(row)
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "compare.csv")
    txt_path = os.path.join(out_dir, "compare.txt")
    bio.write_csv(csv_path, header, rows)
    bio.atomic_write_text(txt_path, bio.format_aligned_table(header, rows))
    summary = {
        "schema": "v1", "command": "compare", "algorithms": algorithms,
        "metric_columns": len(header) - 1,
        "files": {"csv": csv_path, "text": txt_path},
    }
    bio.write_json(os.path.join(out_dir, "run.json"), summary)
    return summary
