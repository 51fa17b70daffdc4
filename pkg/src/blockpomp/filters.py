"""Particle filters (global and block-resampled) and the ensemble Kalman filter.

Stream discipline: every random draw site owns a child stream addressed by
(purpose, iteration, step[, label]). Plain filters run as iteration 1, so a
learning pass degenerated to a single iteration with zero perturbation
consumes identical streams and reproduces a plain filter bit for bit. The
global filter is the block filter run on the whole-graph partition, so the
one-block identity is structural rather than numerical.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .graph import BlockPartition, SpatialGraph, whole_graph_partition
from .model import (
    LOG_ZERO,
    ModelContract,
    ObservationSeries,
    ParameterSwarm,
    UnitParameterField,
    is_log_zero,
)
from .rng import ENKF_NOISE, INIT, PROPAGATE, RESAMPLE, SIM_MEASURE, SIM_STEP, as_node


class FilterNumericalError(RuntimeError):
    """A filter hit an unrecoverable numerical failure."""


class DegenerateWeightsError(RuntimeError):
    """Every particle weight is zero."""


# ---------------------------------------------------------------------------
# Weight arithmetic. The log-zero sentinel is masked before any exp/max; a
# sentinel entry contributes zero probability mass.


def log_mean_exp(log_values) -> float:
    """log of the mean of exp(values), averaging over the full length.

    Sentinel entries count toward the denominator with zero mass; all-sentinel
    input returns the sentinel.
    """
    a = np.asarray(log_values, dtype=float).reshape(-1)
    finite = ~is_log_zero(a)
    if not finite.any():
        return LOG_ZERO
    m = float(a[finite].max())
    return m + math.log(float(np.exp(a[finite] - m).sum()) / a.size)


def normalized_weights(log_values) -> np.ndarray:
    """Self-normalized weights from log values; sentinel entries get weight 0."""
    a = np.asarray(log_values, dtype=float).reshape(-1)
    finite = ~is_log_zero(a)
    if not finite.any():
        raise DegenerateWeightsError("all log-weights are zero-probability")
    w = np.zeros(a.size)
    m = a[finite].max()
    w[finite] = np.exp(a[finite] - m)
    return w / w.sum()


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return 1.0 / float((w**2).sum())


def systematic_resample(weights, gen) -> np.ndarray:
    """Systematic resampling; returns offspring indices in nondecreasing order."""
    w = np.asarray(weights, dtype=float)
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("weights sum to zero")
    if abs(total - 1.0) > 1e-9:
        raise ValueError("weights must be normalized")
    j = w.size
    positions = (gen.random() + np.arange(j)) / j
    return np.minimum(np.searchsorted(np.cumsum(w), positions), j - 1)


def multinomial_resample(weights, gen) -> np.ndarray:
    """Multinomial resampling; returns offspring indices in nondecreasing order."""
    w = np.asarray(weights, dtype=float)
    total = float(w.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("weights sum to zero")
    if abs(total - 1.0) > 1e-9:
        raise ValueError("weights must be normalized")
    j = w.size
    u = np.sort(gen.random(j))
    return np.minimum(np.searchsorted(np.cumsum(w), u), j - 1)


_RESAMPLERS = {
    "systematic": systematic_resample,
    "multinomial": multinomial_resample,
}


def resample_indices(weights, node, method: str = "systematic") -> np.ndarray:
    """One resampling site: sorted offspring indices followed by a uniform
    shuffle from the same stream.

    The shuffle makes the assignment of offspring to particle slots
    exchangeable, so block-wise resampling recouples blocks as independent
    draws from the per-block marginals rather than preserving the slot
    alignment of the sorted indices.
    """
    if method not in _RESAMPLERS:
        raise ValueError(f"unknown resampler {method!r}")
    gen = node.generator()
    idx = _RESAMPLERS[method](weights, gen)
    perm = gen.permutation(idx.size)
    return idx[perm]


def uniform_resample_indices(j: int, node, method: str = "systematic") -> np.ndarray:
    """Resampling under uniform weights (the degenerate-step fallback).

    Consumes exactly the draws of a regular resample so downstream streams do
    not shift when a step degenerates.
    """
    return resample_indices(np.full(j, 1.0 / j), node, method)


def weighted_column_mean(values: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Weighted mean down the particle axis, one column per state dimension."""
    return (w[:, None] * values).sum(axis=0)


# ---------------------------------------------------------------------------
# Outputs


@dataclass
class FilterOutput:
    """Common filter result.

    ess is (N,) for the global filter, (N, n_blocks) for the block filter and
    None for the ensemble filter; a NaN entry marks a degenerate cell whose
    weights were replaced by uniforms. filtered_means is (N, total_dim).
    """

    loglik: float
    step_loglik: np.ndarray
    ess: Optional[np.ndarray]
    filtered_means: np.ndarray
    degenerate_cells: int = 0


def _as_swarm(theta, j: int) -> ParameterSwarm:
    if isinstance(theta, ParameterSwarm):
        return theta
    if isinstance(theta, UnitParameterField):
        return ParameterSwarm.point(theta, j)
    raise TypeError("theta must be a UnitParameterField or ParameterSwarm")


def _check_vertex_logdensity(ld: np.ndarray, v: int, j: int) -> np.ndarray:
    ld = np.asarray(ld, dtype=float).reshape(-1)
    if ld.shape[0] != j:
        raise ValueError(f"dmeasure_unit at vertex {v} returned {ld.shape[0]} values for {j} particles")
    if np.any(np.isnan(ld)) or np.any(np.isposinf(ld)):
        raise FilterNumericalError(f"dmeasure_unit at vertex {v} produced NaN or +inf")
    return ld


# ---------------------------------------------------------------------------
# Particle filters (global and block)


def _block_filter_core(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
                       swarm: ParameterSwarm, node, partition: BlockPartition,
                       resampler: str) -> FilterOutput:
    """One filtering pass with per-block correction.

    The global filter is this core with the whole-graph partition, so the
    one-block identity holds down to the last bit: both run the very same
    instruction sequence on the very same buffers.
    """
    partition.validate(graph)
    j = swarm.J
    layout = model.state_layout
    block_cols = [layout.columns(block) for block in partition.blocks]
    states = np.asarray(model.rinit(swarm, j, node.child(INIT, 1, 0)), dtype=float)
    n_time = data.n_time
    n_blocks = partition.n_blocks
    step_ll = np.empty(n_time)
    ess_arr = np.empty((n_time, n_blocks))
    means = np.empty((n_time, layout.total_dim))
    degenerate = 0
    for n in range(1, n_time + 1):
        t_from, t_to = data.interval(n)
        states = np.asarray(
            model.rprocess(states, swarm, t_from, t_to, node.child(PROPAGATE, 1, n)),
            dtype=float)
        new_states = np.empty_like(states)
        ll_n = 0.0
        for b, block in enumerate(partition.blocks):
            log_w = np.zeros(j)
            for v in block:
                ld = model.dmeasure_unit(v, data.values[n - 1, v], states[:, layout.slc(v)], swarm)
                log_w = log_w + _check_vertex_logdensity(ld, v, j)
            lme = log_mean_exp(log_w)
            cols = block_cols[b]
            resample_node = node.child(RESAMPLE, 1, n, partition.stream_labels[b])
            if is_log_zero(lme):
                degenerate += 1
                ll_n = LOG_ZERO
                ess_arr[n - 1, b] = np.nan
                means[n - 1, cols] = states[:, cols].mean(axis=0)
                idx = uniform_resample_indices(j, resample_node, resampler)
            else:
                ll_n = ll_n + lme
                w = normalized_weights(log_w)
                ess_arr[n - 1, b] = effective_sample_size(w)
                means[n - 1, cols] = weighted_column_mean(states[:, cols], w)
                idx = resample_indices(w, resample_node, resampler)
            new_states[:, cols] = states[np.ix_(idx, cols)]
        step_ll[n - 1] = ll_n
        states = new_states
    return FilterOutput(float(step_ll.sum()), step_ll, ess_arr, means, degenerate)


def pf_run(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
           theta, J: int, rng, resampler: str = "systematic") -> FilterOutput:
    """Bootstrap particle filter with a single global resampling pool."""
    node = as_node(rng)
    swarm = _as_swarm(theta, J)
    out = _block_filter_core(model, graph, data, swarm, node,
                             whole_graph_partition(graph), resampler)
    return FilterOutput(out.loglik, out.step_loglik, out.ess.reshape(-1),
                        out.filtered_means, out.degenerate_cells)


def bpf_run(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
            theta, J: int, rng, partition: Optional[BlockPartition] = None,
            resampler: str = "systematic") -> FilterOutput:
    """Block particle filter: weights, resampling and reassembly per block.

    Propagation is global (blocks interact through the dynamics); the
    correction step factorizes over blocks, each block resampling from its
    own stream and keeping only its own state columns.
    """
    node = as_node(rng)
    swarm = _as_swarm(theta, J)
    if partition is None:
        partition = whole_graph_partition(graph)
    return _block_filter_core(model, graph, data, swarm, node, partition, resampler)


# ---------------------------------------------------------------------------
# Ensemble Kalman filter


def _assemble_ensemble_obs(model: ModelContract, states: np.ndarray, swarm: ParameterSwarm,
                           n_vertices: int):
    layout = model.state_layout
    means, variances = [], []
    for v in range(n_vertices):
        m_v, s_v = model.emeasure_unit(v, states[:, layout.slc(v)], swarm)
        means.append(np.asarray(m_v, dtype=float).reshape(states.shape[0], -1))
        variances.append(np.asarray(s_v, dtype=float).reshape(states.shape[0], -1))
    return np.hstack(means), np.hstack(variances)


def _chol_with_ridge(s: np.ndarray):
    """Cholesky with an escalating diagonal ridge; raises after the last try."""
    dim = s.shape[0]
    lam = max(1e-8 * float(np.trace(s)) / dim, 1e-12)
    for ridge in (0.0, lam, 1000.0 * lam):
        try:
            return cho_factor(s + ridge * np.eye(dim), lower=True)
        except np.linalg.LinAlgError:
            continue
    raise FilterNumericalError("innovation covariance is not positive definite")


def enkf_run(model: ModelContract, graph: SpatialGraph, data: ObservationSeries,
             theta, J: int, rng) -> FilterOutput:
    """Stochastic ensemble Kalman filter with perturbed observations.

    Requires emeasure_unit. The observation noise covariance is the diagonal
    of ensemble-averaged measurement variances; the log-likelihood is the sum
    of Gaussian predictive log-densities of each observation vector.
    """
    if model.emeasure_unit is None:
        raise ValueError("ensemble filtering requires emeasure_unit")
    node = as_node(rng)
    swarm = _as_swarm(theta, J)
    j = swarm.J
    layout = model.state_layout
    obs_total = graph.n_vertices * model.obs_dim
    if j <= obs_total:
        warnings.warn(
            f"ensemble size {j} does not exceed the observation dimension {obs_total}; "
            "covariance estimates will be rank deficient", stacklevel=2)
    states = np.asarray(model.rinit(swarm, j, node.child(INIT, 1, 0)), dtype=float)
    n_time = data.n_time
    step_ll = np.empty(n_time)
    means = np.empty((n_time, layout.total_dim))
    for n in range(1, n_time + 1):
        t_from, t_to = data.interval(n)
        states = np.asarray(
            model.rprocess(states, swarm, t_from, t_to, node.child(PROPAGATE, 1, n)),
            dtype=float)
        obs_means, obs_vars = _assemble_ensemble_obs(model, states, swarm, graph.n_vertices)
        r_diag = obs_vars.mean(axis=0)
        y = data.values[n - 1].reshape(-1)
        m_bar = obs_means.mean(axis=0)
        centered_obs = obs_means - m_bar
        s = (centered_obs.T @ centered_obs) / (j - 1) + np.diag(r_diag)
        chol = _chol_with_ridge(s)
        resid = y - m_bar
        z = cho_solve(chol, resid)
        logdet = 2.0 * float(np.log(np.diag(chol[0])).sum())
        step_ll[n - 1] = -0.5 * (obs_total * math.log(2.0 * math.pi) + logdet
                                 + float(resid @ z))
        centered_x = states - states.mean(axis=0)
        cross = (centered_x.T @ centered_obs) / (j - 1)
        gain = cho_solve(chol, cross.T).T  # (total_dim, obs_total)
        noise = node.child(ENKF_NOISE, 1, n).generator().standard_normal((j, obs_total))
        noise = noise * np.sqrt(r_diag)
        states = states + (y - obs_means - noise) @ gain.T
        if model.project_state is not None:
            states = np.asarray(model.project_state(states, t_to), dtype=float)
        means[n - 1] = states.mean(axis=0)
    return FilterOutput(float(step_ll.sum()), step_ll, None, means, 0)


# ---------------------------------------------------------------------------
# Forward simulation


def simulate(model: ModelContract, graph: SpatialGraph, times, theta, rng,
             t0: float = 0.0):
    """Draw one trajectory and its observations.

    Returns (ObservationSeries, latent states array (N, total_dim)).
    """
    if model.rmeasure_unit is None:
        raise ValueError("simulation requires rmeasure_unit")
    node = as_node(rng)
    swarm = _as_swarm(theta, 1)
    layout = model.state_layout
    times = np.asarray(times, dtype=float)
    n_time = times.shape[0]
    x = np.asarray(model.rinit(swarm, 1, node.child(INIT, 0, 0)), dtype=float)
    latent = np.empty((n_time, layout.total_dim))
    obs = np.empty((n_time, graph.n_vertices, model.obs_dim))
    t_prev = t0
    for n in range(n_time):
        x = np.asarray(model.rprocess(x, swarm, t_prev, float(times[n]),
                                      node.child(SIM_STEP, n + 1)), dtype=float)
        latent[n] = x[0]
        for v in range(graph.n_vertices):
            y_v = model.rmeasure_unit(v, x[:, layout.slc(v)], swarm,
                                      node.child(SIM_MEASURE, n + 1, v))
            obs[n, v] = np.asarray(y_v, dtype=float).reshape(1, -1)[0]
        t_prev = float(times[n])
    return ObservationSeries(times, obs, t0=t0), latent
