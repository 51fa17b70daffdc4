"""Shared fixtures and slow-but-simple reference implementations.

The reference filters here are written with dictionaries and explicit loops
so they share no code path with the package. They exist to cross-check the
vectorized oracles on small instances.
"""
import itertools
import math

import numpy as np
from scipy import stats

from blockpomp.model import (
    LOG_ZERO,
    ModelContract,
    ObservationSeries,
    ParameterLayout,
    ParamSpec,
    StateLayout,
    UnitParameterField,
)
from blockpomp.graph import path_graph

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_location_model():
    """One vertex, degenerate state, observations Y ~ N(mu, 1).

    The only parameter is the per-vertex location "mu"; its maximum
    likelihood estimate is the sample mean of the data.
    """
    graph = path_graph(1)
    layout = ParameterLayout(unit=(ParamSpec("mu", "identity", ivp=False),))

    def rinit(theta, J, rng):
        return np.zeros((J, 1))

    def rprocess(states, theta, t_from, t_to, rng):
        return states.copy()

    def dmeasure_unit(v, y_v, x_v, theta):
        mu = theta.unit_view("mu")[:, v]
        resid = float(np.asarray(y_v).reshape(-1)[0]) - mu
        return -0.5 * (LOG_2PI + resid**2)

    def emeasure_unit(v, x_v, theta):
        mu = theta.unit_view("mu")[:, v]
        return mu.reshape(-1, 1), np.ones((x_v.shape[0], 1))

    def rmeasure_unit(v, x_v, theta, rng):
        mu = theta.unit_view("mu")[:, v]
        return (mu + rng.generator().standard_normal(x_v.shape[0])).reshape(-1, 1)

    model = ModelContract(
        state_layout=StateLayout.uniform(1, 1),
        rinit=rinit,
        rprocess=rprocess,
        dmeasure_unit=dmeasure_unit,
        emeasure_unit=emeasure_unit,
        rmeasure_unit=rmeasure_unit,
        layout=layout,
    )
    return graph, model, layout


def location_field(layout, mu: float) -> UnitParameterField:
    return UnitParameterField(layout, np.array([[mu]]), np.zeros(0))


def _obs_symbol(values, n, v) -> int:
    return int(round(float(np.asarray(values[n, v]).reshape(-1)[0])))


def _transition_code(model, x, v) -> int:
    code = 0
    for u in model.neighborhoods[v]:
        code = code * model.sizes[u] + x[u]
    return code


def exact_forward_reference(model, data: ObservationSeries):
    """Plain-Python forward algorithm over the enumerated joint space.

    Returns (loglik, step_logliks, marginals) where marginals[n][v] is the
    filtered distribution of vertex v after assimilating observation n+1.
    """
    n_v = model.n_vertices
    space = list(itertools.product(*[range(k) for k in model.sizes]))
    p = {}
    for x in space:
        w = 1.0
        for v in range(n_v):
            w *= model.initial[v][x[v]]
        p[x] = w
    n_time = data.values.shape[0]
    step_ll = np.zeros(n_time)
    marginals = []
    for n in range(n_time):
        pred = dict.fromkeys(space, 0.0)
        for x, px in p.items():
            if px == 0.0:
                continue
            for xp in space:
                w = px
                for v in range(n_v):
                    w *= model.transitions[v][_transition_code(model, x, v), xp[v]]
                    if w == 0.0:
                        break
                pred[xp] += w
        post = {}
        c = 0.0
        for xp in space:
            like = 1.0
            for v in range(n_v):
                like *= model.emissions[v][xp[v], _obs_symbol(data.values, n, v)]
            post[xp] = pred[xp] * like
            c += post[xp]
        if c <= 0.0:
            step_ll[n] = LOG_ZERO
            p = pred
            total = sum(p.values())
            p = {x: w / total for x, w in p.items()}
        else:
            step_ll[n] = math.log(c)
            p = {x: w / c for x, w in post.items()}
        marg = []
        for v in range(n_v):
            m = np.zeros(model.sizes[v])
            for x, w in p.items():
                m[x[v]] += w
            marg.append(m)
        marginals.append(marg)
    return float(step_ll.sum()), step_ll, marginals


def blocked_forward_reference(model, partition, data: ObservationSeries):
    """Block-factorized forward recursion, dictionary arithmetic only.

    Prediction uses the current product-form joint; each block is then
    marginalized, corrected with its own observations and renormalized,
    and the joint is reassembled as the product over blocks.
    """
    n_v = model.n_vertices
    space = list(itertools.product(*[range(k) for k in model.sizes]))
    blocks = [tuple(b) for b in partition.blocks]
    p = {}
    for x in space:
        w = 1.0
        for v in range(n_v):
            w *= model.initial[v][x[v]]
        p[x] = w
    n_time = data.values.shape[0]
    step_ll = np.zeros(n_time)
    marginals = []
    for n in range(n_time):
        pred = dict.fromkeys(space, 0.0)
        for x, px in p.items():
            if px == 0.0:
                continue
            for xp in space:
                w = px
                for v in range(n_v):
                    w *= model.transitions[v][_transition_code(model, x, v), xp[v]]
                    if w == 0.0:
                        break
                pred[xp] += w
        block_dists = []
        for block in blocks:
            sub_space = list(itertools.product(*[range(model.sizes[v]) for v in block]))
            q = dict.fromkeys(sub_space, 0.0)
            for xp, w in pred.items():
                q[tuple(xp[v] for v in block)] += w
            c = 0.0
            for sub in sub_space:
                like = 1.0
                for j, v in enumerate(block):
                    like *= model.emissions[v][sub[j], _obs_symbol(data.values, n, v)]
                q[sub] *= like
                c += q[sub]
            if c <= 0.0:
                step_ll[n] += LOG_ZERO
                q = dict.fromkeys(sub_space, 0.0)
                for xp, w in pred.items():
                    q[tuple(xp[v] for v in block)] += w
                total = sum(q.values())
                q = {sub: w / total for sub, w in q.items()}
            else:
                step_ll[n] += math.log(c)
                q = {sub: w / c for sub, w in q.items()}
            block_dists.append(q)
        p = {}
        for x in space:
            w = 1.0
            for block, q in zip(blocks, block_dists):
                w *= q[tuple(x[v] for v in block)]
            p[x] = w
        marg = []
        for v in range(n_v):
            m = np.zeros(model.sizes[v])
            for x, w in p.items():
                m[x[v]] += w
            marg.append(m)
        marginals.append(marg)
    return float(step_ll.sum()), step_ll, marginals


def joint_gaussian_loglik(lg_model, data: ObservationSeries) -> float:
    """Log-density of the stacked observation vector, computed from the
    closed-form joint Gaussian rather than any sequential recursion."""
    a = lg_model.transition
    q = np.diag(lg_model.process_var)
    r = np.diag(lg_model.obs_var)
    n_v = a.shape[0]
    n_time = data.values.shape[0]
    means = []
    m = lg_model.init_mean.copy()
    covs = np.zeros((n_time, n_v, n_v))
    cov = np.diag(lg_model.init_var)
    for n in range(n_time):
        m = a @ m
        cov = a @ cov @ a.T + q
        means.append(m.copy())
        covs[n] = cov
    big = np.zeros((n_time * n_v, n_time * n_v))
    for i in range(n_time):
        big[i * n_v:(i + 1) * n_v, i * n_v:(i + 1) * n_v] = covs[i]
        block = covs[i]
        for j in range(i + 1, n_time):
            block = a @ block
            big[j * n_v:(j + 1) * n_v, i * n_v:(i + 1) * n_v] = block
            big[i * n_v:(i + 1) * n_v, j * n_v:(j + 1) * n_v] = block.T
    for i in range(n_time):
        big[i * n_v:(i + 1) * n_v, i * n_v:(i + 1) * n_v] += r
    mu = np.concatenate(means)
    y = data.values[:, :, 0].reshape(-1) if data.values.ndim == 3 \
        else data.values.reshape(-1)
    return float(stats.multivariate_normal.logpdf(y, mean=mu, cov=big))


def series_from_array(values: np.ndarray, t0: float = 0.0) -> ObservationSeries:
    values = np.asarray(values, dtype=float)
    times = t0 + np.arange(1, values.shape[0] + 1, dtype=float)
    return ObservationSeries(times=times, values=values, t0=t0)
