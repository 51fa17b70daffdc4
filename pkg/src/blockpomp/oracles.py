"""Exactly solvable reference models and the filter error-bound calculator.

The enumeration oracles compute the true filter and the blocked filter (the
J -> infinity limit of block resampling, which re-forms a product measure
over blocks at every step) on small discrete models. The Kalman oracle gives
exact log-likelihoods for linear-Gaussian lattices. These are the ground
truth the Monte Carlo filters are tested against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graph import BlockPartition, SpatialGraph
from .model import (
    LOG_ZERO,
    ModelContract,
    ObservationSeries,
    ParameterLayout,
    ParamSpec,
    StateLayout,
)

MAX_JOINT_STATES = 10**6
# Cap on |S|^2 entries materialized at once during exact prediction.
_PREDICT_CHUNK_BUDGET = 1 << 24


# ---------------------------------------------------------------------------
# Linear-Gaussian lattice


@dataclass(frozen=True)
class LinearGaussianLatticeModel:
    """x' = A x + N(0, diag(q)); y = x + N(0, diag(r_var)); x0 ~ N(m0, diag(p0)).

    One state dimension per vertex; the observation matrix is the identity.
    A's sparsity must respect the graph's interaction radius.
    """

    transition: np.ndarray  # (V, V)
    process_var: np.ndarray  # (V,)
    obs_var: np.ndarray  # (V,)
    init_mean: np.ndarray  # (V,)
    init_var: np.ndarray  # (V,)

    def __post_init__(self):
        a = np.asarray(self.transition, dtype=float)
        object.__setattr__(self, "transition", a)
        for name in ("process_var", "obs_var", "init_mean", "init_var"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        v = a.shape[0]
        if a.shape != (v, v):
            raise ValueError("transition matrix must be square")
        for name in ("process_var", "obs_var", "init_mean", "init_var"):
            if getattr(self, name).shape[0] != v:
                raise ValueError(f"{name} length must match transition size")
        if np.any(self.process_var < 0) or np.any(self.obs_var < 0) or np.any(self.init_var < 0):
            raise ValueError("variances must be nonnegative")

    @property
    def n_vertices(self) -> int:
        return self.transition.shape[0]

    def check_sparsity(self, graph: SpatialGraph) -> None:
        d = graph.distances()
        bad = (np.abs(self.transition) > 0) & (d > graph.interaction_radius)
        if np.any(bad):
            i, j = np.argwhere(bad)[0]
            raise ValueError(f"transition({i},{j}) nonzero outside interaction radius")

    def contract(self, stream_labels: Optional[Sequence[int]] = None,
                 obs_offset_param: bool = False) -> ModelContract:
        """Wrap the model as a plug-and-play contract.

        Process and init noise draw from one child stream per vertex, keyed
        by ``stream_labels`` (defaults to vertex position), so a sub-model
        run with matching labels consumes identical noise. With
        ``obs_offset_param`` the measurement mean becomes x + offset with a
        learnable shared coordinate "obs_offset".
        """
        v = self.n_vertices
        labels = tuple(stream_labels) if stream_labels is not None else tuple(range(v))
        if len(labels) != v:
            raise ValueError("one stream label per vertex required")
        a = self.transition
        sd_q = np.sqrt(self.process_var)
        sd_p0 = np.sqrt(self.init_var)
        sd_r = np.sqrt(self.obs_var)
        layout = ParameterLayout(shared=(ParamSpec("obs_offset", "identity"),)) \
            if obs_offset_param else ParameterLayout()

        def offset(theta):
            return theta.shared_view("obs_offset") if obs_offset_param else 0.0

        def rinit(theta, J, rng):
            x = np.empty((J, v))
            for i in range(v):
                x[:, i] = self.init_mean[i] + sd_p0[i] * rng.child(labels[i]).generator().standard_normal(J)
            return x

        def rprocess(states, theta, t_from, t_to, rng):
            x = states @ a.T
            for i in range(v):
                x[:, i] += sd_q[i] * rng.child(labels[i]).generator().standard_normal(states.shape[0])
            return x

        def dmeasure_unit(i, y_v, x_v, theta):
            resid = float(np.asarray(y_v).reshape(-1)[0]) - (x_v[:, 0] + offset(theta))
            return -0.5 * (math.log(2 * math.pi * self.obs_var[i]) + resid**2 / self.obs_var[i])

        def emeasure_unit(i, x_v, theta):
            mean = x_v[:, :1] + np.asarray(offset(theta)).reshape(-1, 1)
            var = np.full_like(mean, self.obs_var[i])
            return mean, var

        def rmeasure_unit(i, x_v, theta, rng):
            noise = rng.generator().standard_normal((x_v.shape[0], 1))
            return x_v[:, :1] + np.asarray(offset(theta)).reshape(-1, 1) + sd_r[i] * noise

        return ModelContract(
            state_layout=StateLayout.uniform(v, 1),
            rinit=rinit,
            rprocess=rprocess,
            dmeasure_unit=dmeasure_unit,
            emeasure_unit=emeasure_unit,
            rmeasure_unit=rmeasure_unit,
            layout=layout,
        )


@dataclass(frozen=True)
class KalmanResult:
    loglik: float
    step_logliks: np.ndarray  # (N,)
    filtered_means: np.ndarray  # (N, V)
    filtered_covs: np.ndarray  # (N, V, V)


def kalman_exact_loglik(model: LinearGaussianLatticeModel, data: ObservationSeries) -> KalmanResult:
    """Exact Kalman recursion; log-likelihood is the sum of Gaussian
    predictive log-densities of each observation."""
    v = model.n_vertices
    if data.n_vertices != v or data.obs_dim != 1:
        raise ValueError("data shape does not match model")
    a = model.transition
    q = np.diag(model.process_var)
    r = np.diag(model.obs_var)
    m = model.init_mean.copy()
    p = np.diag(model.init_var).astype(float)
    n_time = data.n_time
    step_ll = np.empty(n_time)
    means = np.empty((n_time, v))
    covs = np.empty((n_time, v, v))
    for n in range(n_time):
        m = a @ m
        p = a @ p @ a.T + q
        s = p + r  # H = I
        try:
            chol = np.linalg.cholesky(s)
        except np.linalg.LinAlgError as e:
            raise ValueError("innovation covariance not positive definite") from e
        y = data.values[n, :, 0]
        e = y - m
        z = np.linalg.solve(chol, e)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        step_ll[n] = -0.5 * (v * math.log(2 * math.pi) + logdet + z @ z)
        k = p @ np.linalg.solve(s, np.eye(v)).T
        m = m + k @ e
        p = (np.eye(v) - k) @ p
        p = 0.5 * (p + p.T)
        means[n] = m
        covs[n] = p
    return KalmanResult(float(step_ll.sum()), step_ll, means, covs)


# ---------------------------------------------------------------------------
# Discrete graphical hidden Markov model


class DiscreteHMMModel:
    """Finite-alphabet model with product-form transitions.

    Each vertex v carries an alphabet of ``sizes[v]`` states, a transition
    table of shape (prod of neighbor alphabet sizes, sizes[v]) indexed by the
    previous configuration of N(v) in sorted vertex order, an emission matrix
    (sizes[v], n_symbols[v]) and an initial distribution. The joint kernel is
    the product over vertices of the per-vertex tables.
    """

    def __init__(self, graph: SpatialGraph, sizes: Sequence[int],
                 transitions: Sequence[np.ndarray], emissions: Sequence[np.ndarray],
                 initial: Sequence[np.ndarray]):
        self.graph = graph
        self.sizes = tuple(int(k) for k in sizes)
        v = graph.n_vertices
        if len(self.sizes) != v:
            raise ValueError("one alphabet size per vertex required")
        self.neighborhoods = tuple(graph.neighborhood(i) for i in range(v))
        self.transitions = tuple(np.asarray(t, dtype=float) for t in transitions)
        self.emissions = tuple(np.asarray(e, dtype=float) for e in emissions)
        self.initial = tuple(np.asarray(p, dtype=float).reshape(-1) for p in initial)
        for i in range(v):
            rows = int(np.prod([self.sizes[u] for u in self.neighborhoods[i]]))
            if self.transitions[i].shape != (rows, self.sizes[i]):
                raise ValueError(f"transition table {i} must be ({rows}, {self.sizes[i]})")
            if self.emissions[i].ndim != 2 or self.emissions[i].shape[0] != self.sizes[i]:
                raise ValueError(f"emission matrix {i} must have {self.sizes[i]} rows")
            if self.initial[i].shape[0] != self.sizes[i]:
                raise ValueError(f"initial distribution {i} length mismatch")
            for name, arr in (("transition", self.transitions[i]),
                              ("emission", self.emissions[i])):
                if np.any(np.abs(arr.sum(axis=1) - 1.0) > 1e-12):
                    raise ValueError(f"{name} rows of vertex {i} must sum to 1")
            if abs(self.initial[i].sum() - 1.0) > 1e-12:
                raise ValueError(f"initial distribution {i} must sum to 1")

    @property
    def n_vertices(self) -> int:
        return len(self.sizes)

    @property
    def joint_size(self) -> int:
        return int(np.prod(self.sizes))

    def _require_enumerable(self) -> None:
        if self.joint_size > MAX_JOINT_STATES:
            raise ValueError(
                f"joint state space has {self.joint_size} states, "
                f"exceeding the enumeration cap of {MAX_JOINT_STATES}")

    def _digits(self) -> np.ndarray:
        """(joint_size, V) table decoding joint index -> per-vertex states."""
        s = self.joint_size
        idx = np.arange(s)
        out = np.empty((s, self.n_vertices), dtype=np.int64)
        for v in range(self.n_vertices - 1, -1, -1):
            out[:, v] = idx % self.sizes[v]
            idx //= self.sizes[v]
        return out

    def _neighbor_codes(self, digits: np.ndarray, v: int) -> np.ndarray:
        """Mixed-radix code of the N(v) configuration for each joint state."""
        code = np.zeros(digits.shape[0], dtype=np.int64)
        for u in self.neighborhoods[v]:
            code = code * self.sizes[u] + digits[:, u]
        return code

    def neighbor_codes_from_states(self, states: np.ndarray, v: int) -> np.ndarray:
        """Same mixed-radix code computed from per-vertex state columns (J, V)."""
        code = np.zeros(states.shape[0], dtype=np.int64)
        for u in self.neighborhoods[v]:
            code = code * self.sizes[u] + states[:, u].astype(np.int64)
        return code

    @classmethod
    def random(cls, graph: SpatialGraph, sizes, n_symbols, rng,
               concentration: float = 1.0) -> "DiscreteHMMModel":
        """Random instance with Dirichlet rows."""
        gen = rng.generator() if hasattr(rng, "generator") else np.random.default_rng(rng)
        v = graph.n_vertices
        sizes = tuple(int(k) for k in (sizes if not np.isscalar(sizes) else [sizes] * v))
        syms = tuple(int(k) for k in (n_symbols if not np.isscalar(n_symbols) else [n_symbols] * v))
        transitions, emissions, initial = [], [], []
        for i in range(v):
            rows = int(np.prod([sizes[u] for u in graph.neighborhood(i)]))
            transitions.append(gen.dirichlet([concentration] * sizes[i], size=rows))
            emissions.append(gen.dirichlet([concentration] * syms[i], size=sizes[i]))
            initial.append(gen.dirichlet([concentration] * sizes[i]))
        return cls(graph, sizes, transitions, emissions, initial)

    def contract(self, stream_labels: Optional[Sequence[int]] = None) -> ModelContract:
        """Plug-and-play wrapper; states are stored as one float per vertex."""
        v = self.n_vertices
        labels = tuple(stream_labels) if stream_labels is not None else tuple(range(v))

        def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
            cum = np.cumsum(probs, axis=1)
            return np.minimum((cum < u[:, None]).sum(axis=1), probs.shape[1] - 1)

        def rinit(theta, J, rng):
            x = np.empty((J, v))
            for i in range(v):
                u = rng.child(labels[i]).generator().random(J)
                cum = np.cumsum(self.initial[i])
                x[:, i] = np.minimum(np.searchsorted(cum, u, side="right"), self.sizes[i] - 1)
            return x

        def rprocess(states, theta, t_from, t_to, rng):
            prev = states.astype(np.int64)
            nxt = np.empty_like(states)
            for i in range(v):
                codes = self.neighbor_codes_from_states(prev, i)
                probs = self.transitions[i][codes]
                u = rng.child(labels[i]).generator().random(states.shape[0])
                nxt[:, i] = sample_rows(probs, u)
            return nxt

        def dmeasure_unit(i, y_v, x_v, theta):
            y = int(np.asarray(y_v).reshape(-1)[0])
            p = self.emissions[i][x_v[:, 0].astype(np.int64), y]
            out = np.full(x_v.shape[0], LOG_ZERO)
            pos = p > 0
            out[pos] = np.log(p[pos])
            return out

        def rmeasure_unit(i, x_v, theta, rng):
            probs = self.emissions[i][x_v[:, 0].astype(np.int64)]
            u = rng.generator().random(x_v.shape[0])
            return sample_rows(probs, u)[:, None].astype(float)

        return ModelContract(
            state_layout=StateLayout.uniform(v, 1),
            rinit=rinit,
            rprocess=rprocess,
            dmeasure_unit=dmeasure_unit,
            rmeasure_unit=rmeasure_unit,
        )


@dataclass(frozen=True)
class ExactFilterResult:
    loglik: float
    step_logliks: np.ndarray  # (N,)
    joints: tuple  # per-step joint distribution, each (joint_size,)
    marginals: tuple  # per-step tuple over vertices of (sizes[v],) arrays

    def marginal(self, n: int, v: int) -> np.ndarray:
        return self.marginals[n][v]


def _predict_joint(model: DiscreteHMMModel, p: np.ndarray,
                   lookups: list[np.ndarray]) -> np.ndarray:
    """One exact prediction step: sum over sources of the product measure."""
    s = p.shape[0]
    vcount = model.n_vertices
    out_letters = "".join(chr(ord("a") + i) for i in range(vcount))
    spec = "s," + ",".join("s" + c for c in out_letters) + "->" + out_letters
    chunk = max(1, _PREDICT_CHUNK_BUDGET // s)
    acc = np.zeros(tuple(model.sizes))
    for start in range(0, s, chunk):
        stop = min(start + chunk, s)
        factors = [lookups[v][start:stop] for v in range(vcount)]
        acc += np.einsum(spec, p[start:stop], *factors, optimize=True)
    return acc.reshape(-1)


def _emission_weight(model: DiscreteHMMModel, digits: np.ndarray, y: np.ndarray) -> np.ndarray:
    w = np.ones(digits.shape[0])
    for v in range(model.n_vertices):
        w *= model.emissions[v][digits[:, v], int(y[v])]
    return w


def _joint_marginals(model: DiscreteHMMModel, p: np.ndarray) -> tuple:
    tensor = p.reshape(tuple(model.sizes))
    out = []
    for v in range(model.n_vertices):
        axes = tuple(i for i in range(model.n_vertices) if i != v)
        out.append(tensor.sum(axis=axes))
    return tuple(out)


def _initial_joint(model: DiscreteHMMModel) -> np.ndarray:
    p = np.ones(1)
    for v in range(model.n_vertices):
        p = np.multiply.outer(p, model.initial[v]).reshape(-1)
    return p


def _transition_lookups(model: DiscreteHMMModel, digits: np.ndarray) -> list[np.ndarray]:
    return [model.transitions[v][model._neighbor_codes(digits, v)]
            for v in range(model.n_vertices)]


def enumerate_exact_filter(model: DiscreteHMMModel, data: ObservationSeries) -> ExactFilterResult:
    """Exact forward filter over the enumerated joint state space."""
    model._require_enumerable()
    if data.n_vertices != model.n_vertices:
        raise ValueError("data vertex count does not match model")
    digits = model._digits()
    lookups = _transition_lookups(model, digits)
    p = _initial_joint(model)
    step_ll = np.empty(data.n_time)
    joints, margs = [], []
    for n in range(data.n_time):
        p = _predict_joint(model, p, lookups)
        w = _emission_weight(model, digits, data.values[n, :, 0])
        c = float((p * w).sum())
        if c <= 0:
            step_ll[n] = LOG_ZERO
            p = p / p.sum()  # observation impossible; keep predicting
        else:
            step_ll[n] = math.log(c)
            p = p * w / c
        joints.append(p.copy())
        margs.append(_joint_marginals(model, p))
    total = float(step_ll.sum())
    return ExactFilterResult(total, step_ll, tuple(joints), tuple(margs))


@dataclass(frozen=True)
class ExactBlockedFilterResult:
    loglik: float  # sum over steps of sum over blocks of log block normalizers
    step_logliks: np.ndarray
    joints: tuple  # per-step product-measure joint, each (joint_size,)
    marginals: tuple  # per-step tuple over vertices

    def marginal(self, n: int, v: int) -> np.ndarray:
        return self.marginals[n][v]


def enumerate_exact_blocked_filter(model: DiscreteHMMModel, partition: BlockPartition,
                                   data: ObservationSeries) -> ExactBlockedFilterResult:
    """Exact blocked-filter recursion: predict on the joint, marginalize to
    each block, correct each block with its own observations, re-form the
    product measure over blocks."""
    model._require_enumerable()
    partition.validate(model.graph)
    vcount = model.n_vertices
    digits = model._digits()
    lookups = _transition_lookups(model, digits)
    p = _initial_joint(model)
    step_ll = np.empty(data.n_time)
    joints, margs = [], []
    for n in range(data.n_time):
        pred = _predict_joint(model, p, lookups).reshape(tuple(model.sizes))
        ll_n = 0.0
        degenerate = False
        block_tensors = []
        for block in partition.blocks:
            block_sorted = tuple(sorted(block))
            axes = tuple(i for i in range(vcount) if i not in block_sorted)
            q = pred.sum(axis=axes)  # tensor over block vertices, sorted order
            for pos, v in enumerate(block_sorted):
                ev = model.emissions[v][:, int(data.values[n, v, 0])]
                shape = [1] * q.ndim
                shape[pos] = model.sizes[v]
                q = q * ev.reshape(shape)
            c = float(q.sum())
            if c <= 0:
                degenerate = True
                q = pred.sum(axis=axes)
                c_prior = float(q.sum())
                q = q / c_prior
            else:
                ll_n += math.log(c)
                q = q / c
            block_tensors.append((block_sorted, q))
        step_ll[n] = LOG_ZERO if degenerate else ll_n
        joint = np.ones(tuple(model.sizes))
        for block_sorted, q in block_tensors:
            # q's axes follow sorted vertex order, matching the joint's axes
            shape = [1] * vcount
            for v in block_sorted:
                shape[v] = model.sizes[v]
            joint = joint * q.reshape(shape)
        p = joint.reshape(-1)
        joints.append(p.copy())
        margs.append(_joint_marginals(model, p))
    total = float(step_ll.sum())
    return ExactBlockedFilterResult(total, step_ll, tuple(joints), tuple(margs))


# ---------------------------------------------------------------------------
# Error-bound calculator


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the filter error bound.

    eps_x, eps_y, eps_theta are the process, measurement and perturbation
    density floors in (0, 1]; the integers describe the graph, partition and
    particle count; dist_to_boundary is d(K_tilde, boundary of K) and
    card_target the cardinality of the target vertex set K_tilde.
    """

    eps_x: float
    eps_y: float
    eps_theta: float
    max_neighborhood: int  # Delta
    max_interacting_blocks: int  # Delta_K
    max_block_size: int  # |K|_inf
    radius: int  # r
    n_particles: int  # J
    dist_to_boundary: int = 0
    card_target: int = 1

    def __post_init__(self):
        for name in ("eps_x", "eps_y", "eps_theta"):
            val = getattr(self, name)
            if not (0.0 < val <= 1.0):
                raise ValueError(f"{name} must be in (0, 1]")
        for name in ("max_neighborhood", "max_interacting_blocks", "max_block_size",
                     "radius", "n_particles", "card_target"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.dist_to_boundary < 0:
            raise ValueError("dist_to_boundary must be nonnegative")


@dataclass(frozen=True)
class BoundReport:
    condition_satisfied: bool
    condition_threshold: float
    beta: float
    bias_term: float
    variance_term: float
    total_bound: Optional[float]

    def as_dict(self) -> dict:
        return {
            "condition_satisfied": self.condition_satisfied,
            "condition_threshold": self.condition_threshold,
            "beta": self.beta,
            "bias_term": self.bias_term,
            "variance_term": self.variance_term,
            "total_bound": self.total_bound,
        }


def bound_calculator(inputs: BoundInputs) -> BoundReport:
    """Evaluate the uniform-in-time filter error bound.

    Checks eps_x * eps_theta > (1 - 1/(18 * Delta_K * Delta^2))^(1/(2*Delta)),
    computes the decay rate beta, the blocking bias term, the sampling
    variance term, and the combined bound. When the condition fails the terms
    are still reported (beta may be nonpositive) but the total is omitted.
    """
    delta = inputs.max_neighborhood
    delta_k = inputs.max_interacting_blocks
    kinf = inputs.max_block_size
    denom = 18.0 * delta_k * delta**2
    threshold = (1.0 - 1.0 / denom) ** (1.0 / (2.0 * delta))
    prod = inputs.eps_x * inputs.eps_theta
    satisfied = prod > threshold

    gap = 1.0 - prod ** (2.0 * delta)  # in [0, 1)
    if gap <= 0.0:
        beta = np.inf
    else:
        beta = math.log(1.0 / (denom * gap)) / (2.0 * inputs.radius)

    if gap == 0.0:
        bias = 0.0
    else:
        bias = 8.0 * gap * math.exp(-beta * inputs.dist_to_boundary)

    variance = (192.0 / (5.0 * math.sqrt(inputs.n_particles))) \
        * inputs.eps_theta ** (-4.0 * kinf) \
        * inputs.eps_x ** (-4.0 * kinf) \
        * inputs.eps_y ** (-2.0 * kinf * (delta_k - 1)) \
        * delta_k

    total = None
    if satisfied:
        decay = math.exp(-beta)  # beta > 0 whenever the condition holds
        prefactor = decay * inputs.card_target / (1.0 - decay)
        total = prefactor * (bias + variance)
    return BoundReport(satisfied, threshold, float(beta), float(bias), float(variance), total)
