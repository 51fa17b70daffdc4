"""Iterated filtering: parameter learning by perturbed particle swarms.

Three learners share one skeleton. Each iteration m reruns a filter with the
parameter swarm perturbed at scale sigma_m: initial-value coordinates are
perturbed once before initialization, regular coordinates before every
observation. The global learner resamples (state, parameter) pairs with one
pool; the block learner resamples both block by block, shared coordinates
following the first block; the ensemble learner replaces resampling with a
joint Gaussian update of states and transformed parameters. With one block
the block learner reproduces the global learner draw for draw, and a single
zero-scale iteration reproduces the plain filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve

from .filters import (
    _assemble_ensemble_obs,
    _check_vertex_logdensity,
    _chol_with_ridge,
    bpf_run,
    enkf_run,
    log_mean_exp,
    normalized_weights,
    pf_run,
    resample_indices,
    uniform_resample_indices,
)
from .graph import BlockPartition, SpatialGraph, whole_graph_partition
from .model import (
    LOG_ZERO,
    ModelContract,
    ObservationSeries,
    ParameterSwarm,
    UnitParameterField,
    is_log_zero,
    to_natural,
    to_unconstrained,
)
from .rng import ENKF_NOISE, EVAL, INIT, PERTURB, PROPAGATE, RESAMPLE, as_node


@dataclass(frozen=True)
class CoolingSchedule:
    """Geometric cooling: scale(m) = sigma0 * rate**(m - 1)."""

    sigma0: float = 1.0
    rate: float = 0.9

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be nonnegative")
        if not (0.0 < self.rate <= 1.0):
            raise ValueError("rate must be in (0, 1]")

    def scale(self, m: int) -> float:
        return self.sigma0 * self.rate ** (m - 1)


class PerturbationKernel:
    """Per-coordinate Gaussian random walk on the transformed scale.

    scales maps coordinate names to base standard deviations; missing names
    get zero. At phase n=0 only initial-value coordinates move, at phases
    n>=1 only regular coordinates move. The full noise array is drawn every
    call regardless of phase, so stream consumption never depends on the
    phase or on which scales are zero; a coordinate whose effective scale is
    zero is passed through untouched (no transform round trip).
    """

    def __init__(self, layout, scales: dict):
        self.layout = layout
        known = set(layout.unit_names) | set(layout.shared_names)
        unknown = set(scales) - known
        if unknown:
            raise ValueError(f"scales for unknown parameters: {sorted(unknown)}")
        self.scales = {name: float(scales.get(name, 0.0)) for name in known}
        if any(v < 0 for v in self.scales.values()):
            raise ValueError("perturbation scales must be nonnegative")

    def _phase_scale(self, spec, sigma: float, n: int) -> float:
        active = spec.ivp if n == 0 else not spec.ivp
        return sigma * self.scales[spec.name] if active else 0.0

    def perturb(self, swarm: ParameterSwarm, sigma: float, n: int, node) -> ParameterSwarm:
        gen = node.generator()
        j, v = swarm.J, swarm.n_vertices
        eps_unit = gen.standard_normal((j, v, swarm.layout.n_unit))
        eps_shared = gen.standard_normal((j, swarm.layout.n_shared))
        unit = swarm.unit.copy()
        shared = swarm.shared.copy()
        for c, spec in enumerate(swarm.layout.unit):
            s = self._phase_scale(spec, sigma, n)
            if s == 0.0:
                continue
            z = to_unconstrained(unit[:, :, c], spec.transform) + s * eps_unit[:, :, c]
            unit[:, :, c] = to_natural(z, spec.transform)
        for c, spec in enumerate(swarm.layout.shared):
            s = self._phase_scale(spec, sigma, n)
            if s == 0.0:
                continue
            z = to_unconstrained(shared[:, c], spec.transform) + s * eps_shared[:, c]
            shared[:, c] = to_natural(z, spec.transform)
        return ParameterSwarm(swarm.layout, unit, shared, swarm.iteration)


@dataclass(frozen=True)
class TraceRecord:
    """One learning iteration: in-pass log-likelihood of the perturbed filter
    plus natural-scale swarm mean and spread per coordinate."""

    iteration: int
    loglik: float
    degenerate_cells: int
    param_means: dict
    param_sds: dict


@dataclass
class LearnResult:
    swarm: ParameterSwarm
    trace: tuple
    loglik: float  # in-pass log-likelihood of the final iteration
    degenerate_cells: int = 0

    def point_estimate(self) -> UnitParameterField:
        return self.swarm.mean_field()


def _summarize_swarm(swarm: ParameterSwarm, graph: SpatialGraph):
    means, sds = {}, {}
    for c, spec in enumerate(swarm.layout.unit):
        vals = swarm.unit[:, :, c]
        for i, label in enumerate(graph.vertices):
            key = f"{spec.name}[{label}]"
            means[key] = float(vals[:, i].mean())
            sds[key] = float(vals[:, i].std(ddof=1)) if swarm.J > 1 else 0.0
    for c, spec in enumerate(swarm.layout.shared):
        vals = swarm.shared[:, c]
        means[spec.name] = float(vals.mean())
        sds[spec.name] = float(vals.std(ddof=1)) if swarm.J > 1 else 0.0
    return means, sds


def _iterated_block_core(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
                         initial_swarm: ParameterSwarm, node, n_iterations: int,
                         cooling: CoolingSchedule, kernel: PerturbationKernel,
                         partition: BlockPartition, resampler: str) -> LearnResult:
    """Iterated filtering with per-block resampling of states and parameters.

    Unit-specific coordinates follow the indices of the block containing
    their vertex; shared coordinates follow the first block's indices. The
    global learner is this core with the whole-graph partition, making the
    one-block identity exact to the bit.
    """
    swarm = initial_swarm.copy()
    j = swarm.J
    partition.validate(graph)
    layout = model.state_layout
    block_cols = [layout.columns(block) for block in partition.blocks]
    block_vertices = [np.asarray(block, dtype=int) for block in partition.blocks]
    n_time = data.n_time
    trace = []
    total_degenerate = 0
    loglik = LOG_ZERO
    for m in range(1, n_iterations + 1):
        sigma = cooling.scale(m)
        swarm = kernel.perturb(swarm, sigma, 0, node.child(PERTURB, m, 0))
        states = np.asarray(model.rinit(swarm, j, node.child(INIT, m, 0)), dtype=float)
        step_ll = np.empty(n_time)
        degenerate = 0
        for n in range(1, n_time + 1):
            swarm = kernel.perturb(swarm, sigma, n, node.child(PERTURB, m, n))
            t_from, t_to = data.interval(n)
            states = np.asarray(
                model.rprocess(states, swarm, t_from, t_to, node.child(PROPAGATE, m, n)),
                dtype=float)
            new_states = np.empty_like(states)
            new_unit = np.empty_like(swarm.unit)
            shared_idx = None
            ll_n = 0.0
            for b, block in enumerate(partition.blocks):
                log_w = np.zeros(j)
                for v in block:
                    ld = model.dmeasure_unit(v, data.values[n - 1, v],
                                             states[:, layout.slc(v)], swarm)
                    log_w = log_w + _check_vertex_logdensity(ld, v, j)
                lme = log_mean_exp(log_w)
                resample_node = node.child(RESAMPLE, m, n, partition.stream_labels[b])
                if is_log_zero(lme):
                    degenerate += 1
                    ll_n = LOG_ZERO
                    idx = uniform_resample_indices(j, resample_node, resampler)
                else:
                    ll_n = ll_n + lme
                    idx = resample_indices(normalized_weights(log_w), resample_node, resampler)
                cols = block_cols[b]
                new_states[:, cols] = states[np.ix_(idx, cols)]
                new_unit[:, block_vertices[b], :] = swarm.unit[np.ix_(idx, block_vertices[b])]
                if b == 0:
                    shared_idx = idx
            step_ll[n - 1] = ll_n
            states = new_states
            swarm = ParameterSwarm(swarm.layout, new_unit, swarm.shared[shared_idx],
                                   swarm.iteration)
        loglik = float(step_ll.sum())
        total_degenerate += degenerate
        swarm = swarm.copy(iteration=m)
        means, sds = _summarize_swarm(swarm, graph)
        trace.append(TraceRecord(m, loglik, degenerate, means, sds))
    return LearnResult(swarm, tuple(trace), loglik, total_degenerate)


def if2_run(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
            initial_swarm: ParameterSwarm, rng, n_iterations: int,
            cooling: CoolingSchedule, kernel: PerturbationKernel,
            resampler: str = "systematic") -> LearnResult:
    """Iterated filtering with one global resampling pool per step."""
    return _iterated_block_core(model, graph, data, initial_swarm, as_node(rng),
                                n_iterations, cooling, kernel,
                                whole_graph_partition(graph), resampler)


def ibpf_run(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
             initial_swarm: ParameterSwarm, rng, n_iterations: int,
             cooling: CoolingSchedule, kernel: PerturbationKernel,
             partition: Optional[BlockPartition] = None,
             resampler: str = "systematic") -> LearnResult:
    """Iterated block filtering: states and parameters resampled per block."""
    if partition is None:
        partition = whole_graph_partition(graph)
    return _iterated_block_core(model, graph, data, initial_swarm, as_node(rng),
                                n_iterations, cooling, kernel, partition, resampler)


# ---------------------------------------------------------------------------
# Iterated ensemble Kalman filter


def _swarm_to_z(swarm: ParameterSwarm) -> np.ndarray:
    """(J, P) transformed-scale parameter matrix, unit coords then shared."""
    cols = []
    for c, spec in enumerate(swarm.layout.unit):
        cols.append(to_unconstrained(swarm.unit[:, :, c], spec.transform))
    for c, spec in enumerate(swarm.layout.shared):
        cols.append(to_unconstrained(swarm.shared[:, c], spec.transform)[:, None])
    if not cols:
        return np.empty((swarm.J, 0))
    return np.hstack([np.asarray(c).reshape(swarm.J, -1) for c in cols])


def _z_to_swarm(z: np.ndarray, swarm: ParameterSwarm) -> ParameterSwarm:
    j, v = swarm.J, swarm.n_vertices
    unit = np.empty_like(swarm.unit)
    off = 0
    for c, spec in enumerate(swarm.layout.unit):
        unit[:, :, c] = to_natural(z[:, off:off + v], spec.transform)
        off += v
    shared = np.empty_like(swarm.shared)
    for c, spec in enumerate(swarm.layout.shared):
        shared[:, c] = to_natural(z[:, off], spec.transform)
        off += 1
    return ParameterSwarm(swarm.layout, unit, shared, swarm.iteration)


def ienkf_run(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
              initial_swarm: ParameterSwarm, rng, n_iterations: int,
              cooling: CoolingSchedule, kernel: PerturbationKernel) -> LearnResult:
    """Iterated ensemble Kalman filter.

    States and transformed parameters form one joint ensemble updated through
    the cross-covariance with predicted observations; perturbation phases
    match the particle learners.
    """
    if model.emeasure_unit is None:
        raise ValueError("ensemble learning requires emeasure_unit")
    node = as_node(rng)
    swarm = initial_swarm.copy()
    j = swarm.J
    layout = model.state_layout
    d = layout.total_dim
    obs_total = graph.n_vertices * model.obs_dim
    n_time = data.n_time
    trace = []
    loglik = LOG_ZERO
    for m in range(1, n_iterations + 1):
        sigma = cooling.scale(m)
        swarm = kernel.perturb(swarm, sigma, 0, node.child(PERTURB, m, 0))
        states = np.asarray(model.rinit(swarm, j, node.child(INIT, m, 0)), dtype=float)
        step_ll = np.empty(n_time)
        for n in range(1, n_time + 1):
            swarm = kernel.perturb(swarm, sigma, n, node.child(PERTURB, m, n))
            t_from, t_to = data.interval(n)
            states = np.asarray(
                model.rprocess(states, swarm, t_from, t_to, node.child(PROPAGATE, m, n)),
                dtype=float)
            obs_means, obs_vars = _assemble_ensemble_obs(model, states, swarm,
                                                         graph.n_vertices)
            r_diag = obs_vars.mean(axis=0)
            y = data.values[n - 1].reshape(-1)
            m_bar = obs_means.mean(axis=0)
            centered_obs = obs_means - m_bar
            s = (centered_obs.T @ centered_obs) / (j - 1) + np.diag(r_diag)
            chol = _chol_with_ridge(s)
            resid = y - m_bar
            zs = cho_solve(chol, resid)
            logdet = 2.0 * float(np.log(np.diag(chol[0])).sum())
            step_ll[n - 1] = -0.5 * (obs_total * math.log(2.0 * math.pi) + logdet
                                     + float(resid @ zs))
            z_params = _swarm_to_z(swarm)
            joint = np.hstack([states, z_params])
            centered_joint = joint - joint.mean(axis=0)
            cross = (centered_joint.T @ centered_obs) / (j - 1)
            gain = cho_solve(chol, cross.T).T
            noise = node.child(ENKF_NOISE, m, n).generator().standard_normal((j, obs_total))
            noise = noise * np.sqrt(r_diag)
            joint = joint + (y - obs_means - noise) @ gain.T
            states = joint[:, :d]
            if model.project_state is not None:
                states = np.asarray(model.project_state(states, t_to), dtype=float)
            swarm = _z_to_swarm(joint[:, d:], swarm)
        loglik = float(step_ll.sum())
        swarm = swarm.copy(iteration=m)
        means, sds = _summarize_swarm(swarm, graph)
        trace.append(TraceRecord(m, loglik, 0, means, sds))
    return LearnResult(swarm, tuple(trace), loglik, 0)


# ---------------------------------------------------------------------------
# Metric evaluation at a fixed parameter field


METRIC_IDS = {"enkf": 0, "pf": 1, "bpf": 2}


@dataclass(frozen=True)
class MetricResult:
    metric: str
    values: np.ndarray  # (replicates,) raw log-likelihoods
    mean: float
    se: float  # NaN with one replicate
    normalized: float  # mean / (n_vertices * n_time)


def evaluate_metrics(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
                     theta: UnitParameterField, J: int, rng, replicates: int = 1,
                     partition: Optional[BlockPartition] = None,
                     metrics: Sequence[str] = ("pf",),
                     resampler: str = "systematic") -> dict:
    """Replicated log-likelihood evaluation at one parameter field.

    Each metric replicate runs on its own substream keyed by (metric, rep),
    so adding replicates or metrics never shifts existing ones. A model
    without emeasure_unit reports the ensemble metric as NaN instead of
    failing, keeping the other metrics usable.
    """
    node = as_node(rng)
    per_cell = graph.n_vertices * data.n_time
    out = {}
    for metric in metrics:
        if metric not in METRIC_IDS:
            raise ValueError(f"unknown metric {metric!r}")
        if metric == "enkf" and model.emeasure_unit is None:
            nan = float("nan")
            out[metric] = MetricResult(metric, np.full(replicates, nan), nan, nan, nan)
            continue
        mid = METRIC_IDS[metric]
        values = np.empty(replicates)
        for rep in range(replicates):
            sub = node.child(EVAL, mid, rep)
            if metric == "pf":
                res = pf_run(model, graph, data, theta, J, sub, resampler=resampler)
            elif metric == "bpf":
                res = bpf_run(model, graph, data, theta, J, sub, partition=partition,
                              resampler=resampler)
            else:
                res = enkf_run(model, graph, data, theta, J, sub)
            values[rep] = res.loglik
        mean = float(values.mean())
        se = float(values.std(ddof=1) / math.sqrt(replicates)) if replicates > 1 else float("nan")
        out[metric] = MetricResult(metric, values, mean, se, mean / per_cell)
    return out
