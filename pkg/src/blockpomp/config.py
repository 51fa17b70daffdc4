"""Experiment configuration: one JSON document with every default filled in.

Unknown keys, bad types and out-of-range values are collected and reported
together in a single error so a config can be fixed in one pass.
"""

from __future__ import annotations

import copy
import importlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .graph import BlockPartition, SpatialGraph, build_contiguous_partition, path_graph
from .measles import (
    CASES,
    CityCovariates,
    MeaslesParams,
    biweekly_times,
    build_measles_model,
    case_layout,
    measles_graph,
    truth_field,
)
from .model import ModelContract, UnitParameterField
from .oracles import DiscreteHMMModel, LinearGaussianLatticeModel
from .rng import INIT, RngNode

FILTER_ALGORITHMS = ("pf", "bpf", "enkf")
LEARN_ALGORITHMS = ("ibpf", "if2", "ienkf")
MODELS = ("measles", "linear-gaussian", "discrete-hmm", "plugin")

DEFAULTS: dict = {
    "schema": "v1",
    "model": "measles",
    "case": "case2",
    "algorithm": "ibpf",
    "J": 2000,
    "M": 20,
    "replicates": 10,
    "seed": 20260816,
    "out": "results",
    "threads": 1,
    "block_size": 2,
    "resampler": "systematic",
    "dataset": None,
    "params": None,
    "cooling": {"sigma0": 1.0, "rate": 0.9},
    "perturb_scales": {
        "S_0": 0.2, "E_0": 0.2, "I_0": 0.2, "R_0": 0.2,
        "R0": 0.02, "alpha": 0.02, "sigma_SE": 0.02,
    },
    "boxes": {
        "S_0": [0.0, 1.0], "E_0": [0.0, 1.0], "I_0": [0.0, 1.0], "R_0": [0.0, 1.0],
        "alpha": [0.0, 2.0], "sigma_SE": [0.0, 1.0], "R0": [25.0, 35.0],
    },
    "eval_replicates": 5,
    "selection_replicates": 1,
    "eval_metrics": ["enkf", "pf", "bpf"],
    "measles": {
        "cities": 4,
        "n_years": 15,
        "per_year": 26,
        "steps_per_obs": 7,
        "v_floor": 1.0,
        "rho": 0.5,
        "psi_obs": 0.15,
        "mu_death": 0.02,
        "mu_ei": 52.0,
        "mu_ir": 52.0,
        "term_frac": 0.759,
        "theta_amp": 0.5,
        "iota": 0.0,
        "gravity": 400.0,
        "baseline_spread": 0.0355,
        "covariates": None,
        "distances": None,
    },
    "linear_gaussian": {
        "n_vertices": 3,
        "self_coef": 0.7,
        "coupling": 0.1,
        "process_var": 1.0,
        "obs_var": 1.0,
        "init_mean": 0.0,
        "init_var": 1.0,
        "n_time": 50,
    },
    "discrete_hmm": {
        "n_vertices": 2,
        "states": 2,
        "symbols": 2,
        "concentration": 1.0,
        "interaction_radius": 1,
        "n_time": 5,
    },
    "plugin": None,
    "compare": None,
}


class ConfigError(ValueError):
    """Aggregated configuration problems; messages holds one line each."""

    def __init__(self, messages):
        if isinstance(messages, str):
            messages = [messages]
        self.messages = list(messages)
        super().__init__("\n".join(self.messages))


def merge_config(user: Optional[dict]) -> dict:
    """Deep-merge a user document over the defaults.

    Dictionaries merge key by key except the free-form maps (perturb_scales,
    boxes, plugin, compare), which are replaced or extended wholesale; any
    other unknown key is an error.
    """
    errors: list = []
    cfg = copy.deepcopy(DEFAULTS)
    free_form = {"perturb_scales", "boxes"}

    def merge(base: dict, over: dict, prefix: str, free: bool):
        for key, val in over.items():
            if not free and key not in base:
                errors.append(f"unknown config key {prefix + key!r}")
                continue
            if isinstance(base.get(key), dict) and isinstance(val, dict) \
                    and key not in ("plugin", "compare"):
                merge(base[key], val, prefix + key + ".", key in free_form)
            else:
                base[key] = copy.deepcopy(val)

    if user:
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        merge(cfg, user, "", False)
    if errors:
        raise ConfigError(errors)
    return cfg


def _check_number(errors, cfg, key, lo=None, hi=None, integer=False, positive=False):
    val = cfg
    for part in key.split("."):
        val = val[part]
    ok = isinstance(val, (int, float)) and not isinstance(val, bool)
    if ok and integer and int(val) != val:
        ok = False
    if ok and positive and val <= 0:
        ok = False
    if ok and lo is not None and val < lo:
        ok = False
    if ok and hi is not None and val > hi:
        ok = False
    if not ok:
        errors.append(f"config key {key!r} has invalid value {val!r}")


def validate_config(cfg: dict, command: str = "learn") -> None:
    errors: list = []
    if cfg["model"] not in MODELS:
        errors.append(f"model must be one of {MODELS}, got {cfg['model']!r}")
    if cfg["model"] == "measles" and cfg["case"] not in CASES:
        errors.append(f"case must be one of {sorted(CASES)}, got {cfg['case']!r}")
    for key in ("J", "M", "replicates", "threads", "block_size",
                "eval_replicates", "selection_replicates"):
        _check_number(errors, cfg, key, integer=True, positive=True)
    _check_number(errors, cfg, "seed", lo=0, integer=True)
    _check_number(errors, cfg, "cooling.sigma0", lo=0.0)
    _check_number(errors, cfg, "cooling.rate", lo=1e-12, hi=1.0)
    if cfg["resampler"] not in ("systematic", "multinomial"):
        errors.append(f"resampler must be systematic or multinomial, got {cfg['resampler']!r}")
    if command == "learn" and cfg["algorithm"] not in LEARN_ALGORITHMS:
        errors.append(f"learning algorithm must be one of {LEARN_ALGORITHMS}, "
                      f"got {cfg['algorithm']!r}")
    if command == "filter" and cfg["algorithm"] not in FILTER_ALGORITHMS:
        errors.append(f"filter algorithm must be one of {FILTER_ALGORITHMS}, "
                      f"got {cfg['algorithm']!r}")
    bad_metrics = [m for m in cfg["eval_metrics"] if m not in FILTER_ALGORITHMS]
    if bad_metrics:
        errors.append(f"eval_metrics entries must be among {FILTER_ALGORITHMS}: {bad_metrics}")
    for name, box in cfg["boxes"].items():
        if (not isinstance(box, (list, tuple))) or len(box) != 2 \
                or not all(isinstance(x, (int, float)) for x in box) or box[0] > box[1]:
            errors.append(f"box for {name!r} must be [lo, hi] with lo <= hi, got {box!r}")
    for name, scale in cfg["perturb_scales"].items():
        if not isinstance(scale, (int, float)) or scale < 0:
            errors.append(f"perturbation scale for {name!r} must be nonnegative, got {scale!r}")
    if cfg["model"] == "measles":
        _check_number(errors, cfg, "measles.cities", integer=True, positive=True)
        _check_number(errors, cfg, "measles.n_years", positive=True)
        _check_number(errors, cfg, "measles.per_year", integer=True, positive=True)
        _check_number(errors, cfg, "measles.steps_per_obs", integer=True, positive=True)
        _check_number(errors, cfg, "measles.rho", lo=1e-12, hi=1.0)
        _check_number(errors, cfg, "measles.v_floor", lo=0.0)
    if cfg["model"] == "linear-gaussian":
        _check_number(errors, cfg, "linear_gaussian.n_vertices", integer=True, positive=True)
        _check_number(errors, cfg, "linear_gaussian.n_time", integer=True, positive=True)
        _check_number(errors, cfg, "linear_gaussian.process_var", lo=0.0)
        _check_number(errors, cfg, "linear_gaussian.obs_var", lo=0.0)
    if cfg["model"] == "discrete-hmm":
        _check_number(errors, cfg, "discrete_hmm.n_vertices", integer=True, positive=True)
        _check_number(errors, cfg, "discrete_hmm.states", lo=2, integer=True)
        _check_number(errors, cfg, "discrete_hmm.symbols", lo=2, integer=True)
        _check_number(errors, cfg, "discrete_hmm.n_time", integer=True, positive=True)
    if cfg["model"] == "plugin" and not (isinstance(cfg.get("plugin"), dict)
                                         and "target" in cfg["plugin"]):
        errors.append("plugin model requires a plugin object with a 'target' of the form "
                      "'package.module:function'")
    if errors:
        raise ConfigError(errors)


@dataclass
class ModelBundle:
    """Everything the harness needs about one configured model."""

    name: str
    graph: SpatialGraph
    model: ModelContract
    partition: BlockPartition
    truth: Optional[UnitParameterField]
    times: np.ndarray
    t0: float
    city_names: tuple
    state_columns: tuple
    truth_full: Optional[UnitParameterField] = None  # all learnable coords
    measles_params: Optional[MeaslesParams] = None
    covariates: Optional[CityCovariates] = None


def _build_measles(cfg: dict, node: RngNode) -> ModelBundle:
    from .io import read_covariates_csv, read_distances_csv

    m = cfg["measles"]
    if m["covariates"] is not None:
        names, population, birth_rate, t0 = read_covariates_csv(m["covariates"])
        if m["distances"] is None:
            raise ConfigError("measles.covariates requires measles.distances")
        distances = read_distances_csv(m["distances"], names)
        cov = CityCovariates(names, population, birth_rate, distances, t0=t0)
    else:
        cov = CityCovariates.synthetic(int(m["cities"]))
    overrides = dict(mu_death=m["mu_death"], mu_ei=m["mu_ei"], mu_ir=m["mu_ir"],
                     term_frac=m["term_frac"], theta_amp=m["theta_amp"], iota=m["iota"],
                     gravity=m["gravity"], rho=m["rho"], psi=m["psi_obs"])
    params = MeaslesParams.synthetic(cov.n_cities, node.child(INIT),
                                     spread=m["baseline_spread"], **overrides)
    model = build_measles_model(params, cov, cfg["case"],
                                steps_per_obs=int(m["steps_per_obs"]),
                                v_floor=m["v_floor"])
    graph = measles_graph(cov)
    partition = build_contiguous_partition(graph, int(cfg["block_size"]))
    times = biweekly_times(cov, int(m["n_years"]), int(m["per_year"]))
    columns = tuple(f"{city}:{comp}" for city in cov.names for comp in ("S", "E", "I", "Z"))
    return ModelBundle(
        name="measles", graph=graph, model=model, partition=partition,
        truth=truth_field(params, model.layout), times=times, t0=cov.t0,
        city_names=cov.names, state_columns=columns,
        truth_full=truth_field(params, case_layout("case4")),
        measles_params=params, covariates=cov)


def _build_linear_gaussian(cfg: dict) -> ModelBundle:
    lg = cfg["linear_gaussian"]
    v = int(lg["n_vertices"])
    graph = path_graph(v, interaction_radius=1)
    a = np.eye(v) * float(lg["self_coef"])
    for i, j in graph.edges:
        a[i, j] = a[j, i] = float(lg["coupling"])
    model = LinearGaussianLatticeModel(
        transition=a,
        process_var=np.full(v, float(lg["process_var"])),
        obs_var=np.full(v, float(lg["obs_var"])),
        init_mean=np.full(v, float(lg["init_mean"])),
        init_var=np.full(v, float(lg["init_var"])))
    model.check_sparsity(graph)
    contract = model.contract()
    partition = build_contiguous_partition(graph, int(cfg["block_size"]))
    times = np.arange(1, int(lg["n_time"]) + 1, dtype=float)
    names = tuple(f"v{i}" for i in range(v))
    truth = UnitParameterField(contract.layout, np.empty((v, 0)), np.empty(0))
    return ModelBundle(
        name="linear-gaussian", graph=graph, model=contract, partition=partition,
        truth=truth, times=times, t0=0.0, city_names=names, state_columns=names,
        truth_full=truth)


def _build_discrete_hmm(cfg: dict, node: RngNode) -> ModelBundle:
    h = cfg["discrete_hmm"]
    v = int(h["n_vertices"])
    graph = path_graph(v, interaction_radius=int(h["interaction_radius"]))
    model = DiscreteHMMModel.random(graph, int(h["states"]), int(h["symbols"]),
                                    node.child(INIT), concentration=h["concentration"])
    contract = model.contract()
    partition = build_contiguous_partition(graph, int(cfg["block_size"]))
    times = np.arange(1, int(h["n_time"]) + 1, dtype=float)
    names = tuple(f"v{i}" for i in range(v))
    truth = UnitParameterField(contract.layout, np.empty((v, 0)), np.empty(0))
    return ModelBundle(
        name="discrete-hmm", graph=graph, model=contract, partition=partition,
        truth=truth, times=times, t0=0.0, city_names=names, state_columns=names,
        truth_full=truth)


def _build_plugin(cfg: dict, node: RngNode) -> ModelBundle:
    target = cfg["plugin"]["target"]
    options = cfg["plugin"].get("options", {})
    try:
        module_name, func_name = target.split(":")
        builder = getattr(importlib.import_module(module_name), func_name)
    except (ValueError, ImportError, AttributeError) as e:
        raise ConfigError(f"cannot load plugin {target!r}: {e}") from e
    parts = builder(options, node)
    required = {"graph", "model", "times"}
    missing = required - set(parts)
    if missing:
        raise ConfigError(f"plugin {target!r} must supply keys {sorted(missing)}")
    graph = parts["graph"]
    model = parts["model"]
    if not isinstance(model, ModelContract):
        raise ConfigError(f"plugin {target!r} returned a non-contract model")
    partition = parts.get("partition") or build_contiguous_partition(
        graph, int(cfg["block_size"]))
    names = tuple(parts.get("city_names") or (str(v) for v in graph.vertices))
    v = graph.n_vertices
    truth = parts.get("truth")
    if truth is None:
        truth = UnitParameterField(model.layout,
                                   np.empty((v, model.layout.n_unit)),
                                   np.empty(model.layout.n_shared)) \
            if model.layout.n_unit == 0 and model.layout.n_shared == 0 else None
    columns = tuple(parts.get("state_columns")
                    or (f"x{d}" for d in range(model.state_layout.total_dim)))
    return ModelBundle(
        name="plugin", graph=graph, model=model, partition=partition, truth=truth,
        times=np.asarray(parts["times"], dtype=float), t0=float(parts.get("t0", 0.0)),
        city_names=names, state_columns=columns, truth_full=truth)


def build_bundle(cfg: dict, node: RngNode) -> ModelBundle:
    """Instantiate the configured model; instance draws derive from `node`."""
    if cfg["model"] == "measles":
        return _build_measles(cfg, node)
    if cfg["model"] == "linear-gaussian":
        return _build_linear_gaussian(cfg)
    if cfg["model"] == "discrete-hmm":
        return _build_discrete_hmm(cfg, node)
    if cfg["model"] == "plugin":
        return _build_plugin(cfg, node)
    raise ConfigError(f"unknown model {cfg['model']!r}")
