"""Spatiotemporal measles benchmark: coupled SEIR dynamics over cities.

Each city carries compartments (S, E, I, Z) where Z accumulates recoveries
within one observation interval and resets when the next interval starts;
the recovered class is implicit (population minus the rest). Cities couple
through a gravity travel matrix inside the force of infection. Case counts
are observed biweekly through an overdispersed rounded-normal channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .filters import simulate
from .graph import SpatialGraph, complete_graph
from .model import (
    LOG_ZERO,
    ModelContract,
    ParameterLayout,
    ParamSpec,
    StateLayout,
    UnitParameterField,
)

_GOLDEN_ANGLE = 2.399963
_SIGMA_TINY = 1e-8

_BASELINES = {
    "alpha": 1.0,
    "R0": 30.0,
    "sigma_SE": 0.15,
    "S_0": 0.032,
    "E_0": 5e-5,
    "I_0": 4e-5,
}

# Learnable coordinates per benchmark case: (name, transform, ivp flag).
_IVP_COORDS = (
    ("S_0", "logit", True),
    ("E_0", "logit", True),
    ("I_0", "logit", True),
    ("R_0", "logit", True),
)
CASES = {
    "case1": _IVP_COORDS,
    "case2": _IVP_COORDS + (("R0", "log", False),),
    "case3": _IVP_COORDS + (("alpha", "log", False),),
    "case4": _IVP_COORDS + (("alpha", "log", False), ("sigma_SE", "log", False),
                            ("R0", "log", False)),
}


@dataclass(frozen=True)
class CityCovariates:
    """Static per-city covariates: population, yearly births, distances."""

    names: tuple
    population: np.ndarray  # (V,)
    birth_rate: np.ndarray  # (V,) births per year
    distances: np.ndarray  # (V, V)
    t0: float = 1950.0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "population", np.asarray(self.population, dtype=float))
        object.__setattr__(self, "birth_rate", np.asarray(self.birth_rate, dtype=float))
        object.__setattr__(self, "distances", np.asarray(self.distances, dtype=float))
        v = len(self.names)
        if self.population.shape != (v,) or self.birth_rate.shape != (v,):
            raise ValueError("population and birth_rate must have one entry per city")
        if self.distances.shape != (v, v):
            raise ValueError("distances must be a square city-by-city matrix")
        if np.any(self.population <= 0):
            raise ValueError("populations must be positive")

    @property
    def n_cities(self) -> int:
        return len(self.names)

    @classmethod
    def synthetic(cls, n_cities: int, t0: float = 1950.0) -> "CityCovariates":
        """Deterministic benchmark geography.

        Populations decay harmonically from 3.39e6; cities sit on a golden
        spiral so pairwise distances are distinct; births run at 2 percent
        of population per year.
        """
        v = np.arange(n_cities)
        population = 3.39e6 / (v + 1)
        radius = 50.0 * np.sqrt(v)
        angle = v * _GOLDEN_ANGLE
        coords = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        diff = coords[:, None, :] - coords[None, :, :]
        distances = np.sqrt((diff**2).sum(axis=2))
        names = tuple(f"city{i + 1:02d}" for i in range(n_cities))
        return cls(names, population, 0.02 * population, distances, t0=t0)


@dataclass(frozen=True)
class MeaslesParams:
    """Full parameter set: per-city arrays plus shared rate constants.

    The initial fractions (s_frac, e_frac, i_frac, r_frac) are renormalized
    to sum to one wherever they are consumed, so callers may store
    unnormalized values.
    """

    alpha: np.ndarray  # (V,) mixing exponent
    basic_r0: np.ndarray  # (V,)
    sigma_se: np.ndarray  # (V,) infection noise intensity
    s_frac: np.ndarray
    e_frac: np.ndarray
    i_frac: np.ndarray
    r_frac: np.ndarray
    mu_death: float = 0.02
    mu_ei: float = 52.0
    mu_ir: float = 52.0
    term_frac: float = 0.759  # fraction of the year in school term
    theta_amp: float = 0.5  # term-time seasonality amplitude
    iota: float = 0.0  # imported infectious pressure
    gravity: float = 400.0
    rho: float = 0.5  # reporting probability
    psi: float = 0.15  # reporting overdispersion

    def __post_init__(self):
        arrays = ("alpha", "basic_r0", "sigma_se", "s_frac", "e_frac", "i_frac", "r_frac")
        v = None
        for name in arrays:
            a = np.asarray(getattr(self, name), dtype=float).reshape(-1)
            object.__setattr__(self, name, a)
            if v is None:
                v = a.shape[0]
            elif a.shape[0] != v:
                raise ValueError("per-city parameter arrays must share one length")
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError("rho must be in [0, 1]")

    @property
    def n_cities(self) -> int:
        return self.alpha.shape[0]

    @classmethod
    def baseline(cls, n_cities: int, **overrides) -> "MeaslesParams":
        b = _BASELINES
        r = 1.0 - b["S_0"] - b["E_0"] - b["I_0"]
        full = np.full(n_cities, 1.0)
        return cls(alpha=b["alpha"] * full, basic_r0=b["R0"] * full,
                   sigma_se=b["sigma_SE"] * full, s_frac=b["S_0"] * full,
                   e_frac=b["E_0"] * full, i_frac=b["I_0"] * full,
                   r_frac=r * full, **overrides)

    @classmethod
    def synthetic(cls, n_cities: int, rng, spread: float = 0.0355, **overrides) -> "MeaslesParams":
        """Baseline values jiggled city by city: baseline * U[0.99, 1 + spread).

        Draw order is one uniform block per parameter in the order alpha, R0,
        sigma_SE, S_0, E_0, I_0.
        """
        gen = rng.generator() if hasattr(rng, "generator") else np.random.default_rng(rng)
        lo, hi = 0.99, 1.0 + spread
        draws = {name: _BASELINES[name] * gen.uniform(lo, hi, size=n_cities)
                 for name in ("alpha", "R0", "sigma_SE", "S_0", "E_0", "I_0")}
        r = 1.0 - draws["S_0"] - draws["E_0"] - draws["I_0"]
        return cls(alpha=draws["alpha"], basic_r0=draws["R0"], sigma_se=draws["sigma_SE"],
                   s_frac=draws["S_0"], e_frac=draws["E_0"], i_frac=draws["I_0"],
                   r_frac=r, **overrides)


_PARAM_SOURCES = {
    "S_0": "s_frac",
    "E_0": "e_frac",
    "I_0": "i_frac",
    "R_0": "r_frac",
    "R0": "basic_r0",
    "alpha": "alpha",
    "sigma_SE": "sigma_se",
}


def case_layout(case: str) -> ParameterLayout:
    if case not in CASES:
        raise ValueError(f"unknown benchmark case {case!r}; choose from {sorted(CASES)}")
    return ParameterLayout(unit=tuple(ParamSpec(n, t, ivp) for n, t, ivp in CASES[case]))


def truth_field(params: MeaslesParams, layout: ParameterLayout) -> UnitParameterField:
    """The generating values arranged to match a case layout."""
    unit = np.stack([getattr(params, _PARAM_SOURCES[s.name]) for s in layout.unit], axis=1) \
        if layout.n_unit else np.empty((params.n_cities, 0))
    shared = np.empty(0)
    return UnitParameterField(layout, unit, shared)


def measles_graph(covariates: CityCovariates) -> SpatialGraph:
    """Gravity coupling touches every pair, so the graph is complete."""
    return complete_graph(covariates.names, interaction_radius=1)


def travel_matrix(covariates: CityCovariates, gravity: float) -> np.ndarray:
    """Gravity travel intensities, zero diagonal.

    theta[v, w] = gravity * (mean distance / mean population**2)
                  * population[v] * population[w] / distance[v, w]
    """
    v = covariates.n_cities
    if v == 1:
        return np.zeros((1, 1))
    d = covariates.distances
    off = ~np.eye(v, dtype=bool)
    if np.any(d[off] <= 0):
        raise ValueError("off-diagonal city distances must be positive")
    d_bar = float(d[off].mean())
    p_bar = float(covariates.population.mean())
    theta = gravity * (d_bar / p_bar**2) * np.outer(covariates.population,
                                                    covariates.population)
    theta[off] /= d[off]
    np.fill_diagonal(theta, 0.0)
    return theta


def seasonal_beta(t: float, r0, mu_ir: float, term_frac: float, theta_amp: float):
    """Term-time forced contact rate.

    In school term (the first term_frac of each year) the rate is boosted so
    the yearly average stays at r0 * mu_ir; in vacation it is damped.
    """
    in_term = (t % 1.0) < term_frac
    boost = 1.0 + theta_amp * (1.0 - term_frac) / term_frac
    factor = boost if in_term else (1.0 - theta_amp)
    return factor * np.asarray(r0) * mu_ir


def force_of_infection(i_counts, population, alpha, beta, travel, iota):
    """Per-city infection rate combining local mixing and gravity coupling.

    i_counts, alpha, beta are (J, V); population is (V,); travel is (V, V).
    Negative coupling corrections are floored at zero rate.
    """
    p = np.asarray(population)
    own = ((i_counts + iota) / p) ** alpha
    q = (i_counts / p) ** alpha
    coupling = (q @ travel - q * travel.sum(axis=0)) / p
    return np.maximum(np.asarray(beta) * (own + coupling), 0.0)


def _exit_probs(rate1, rate2, dt):
    """First-exit probability and conditional second-exit probability for two
    competing exponential exits over one Euler step. Elementwise; rates may be
    scalars or arrays."""
    total = rate1 + rate2
    p_exit = -np.expm1(-total * dt)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac1 = np.where(total > 0, rate1 / np.where(total > 0, total, 1.0), 0.0)
    p1 = np.clip(p_exit * frac1, 0.0, 1.0)
    p2 = np.clip(p_exit * (1.0 - frac1), 0.0, 1.0)
    denom = 1.0 - p1
    p2c = np.clip(np.where(denom > 0, p2 / np.where(denom > 0, denom, 1.0), 0.0), 0.0, 1.0)
    return p1, p2c


def _split_exits(n, rate1, rate2, dt, gen):
    """Competing exponential exits realized as two sequential binomials."""
    p1, p2c = _exit_probs(np.asarray(rate1, dtype=float),
                          np.asarray(rate2, dtype=float), dt)
    n1 = gen.binomial(n, p1)
    n2 = gen.binomial(n - n1, p2c)
    return n1, n2


def _unit_values(swarm, name: str, fixed: np.ndarray) -> np.ndarray:
    """(J, V) or broadcastable (1, V) values: swarm coordinate if learned,
    else the fixed per-city array."""
    if swarm.has(name):
        return swarm.unit_view(name)
    return fixed[None, :]


def build_measles_model(params: MeaslesParams, covariates: CityCovariates, case: str,
                        steps_per_obs: int = 7, v_floor: float = 1.0) -> ModelContract:
    """Assemble the benchmark model for one learnable-coordinate case.

    Coordinates present in the case layout are read per particle from the
    swarm; everything else comes from ``params``. v_floor keeps the
    measurement variance away from zero at Z = 0.
    """
    layout = case_layout(case)
    v_cities = covariates.n_cities
    if params.n_cities != v_cities:
        raise ValueError("params and covariates disagree on the number of cities")
    travel = travel_matrix(covariates, params.gravity)
    travel_colsum = travel.sum(axis=0)
    pop = covariates.population
    births_per_year = covariates.birth_rate
    pop_floor = np.floor(pop)
    rho, psi = params.rho, params.psi

    def rinit(swarm, J, rng):
        s0 = _unit_values(swarm, "S_0", params.s_frac)
        e0 = _unit_values(swarm, "E_0", params.e_frac)
        i0 = _unit_values(swarm, "I_0", params.i_frac)
        r0 = _unit_values(swarm, "R_0", params.r_frac)
        total = s0 + e0 + i0 + r0
        x = np.zeros((J, v_cities, 4))
        x[:, :, 0] = np.rint(s0 / total * pop)
        x[:, :, 1] = np.rint(e0 / total * pop)
        x[:, :, 2] = np.rint(i0 / total * pop)
        return x.reshape(J, v_cities * 4)

    def rprocess(states, swarm, t_from, t_to, rng):
        gen = rng.generator()
        j = states.shape[0]
        x = states.reshape(j, v_cities, 4)
        s = np.maximum(np.rint(x[:, :, 0]), 0).astype(np.int64)
        e = np.maximum(np.rint(x[:, :, 1]), 0).astype(np.int64)
        i = np.maximum(np.rint(x[:, :, 2]), 0).astype(np.int64)
        z = np.zeros((j, v_cities), dtype=np.int64)  # recoveries this interval
        alpha = np.broadcast_to(_unit_values(swarm, "alpha", params.alpha), (j, v_cities))
        r0 = np.broadcast_to(_unit_values(swarm, "R0", params.basic_r0), (j, v_cities))
        sigma = np.broadcast_to(_unit_values(swarm, "sigma_SE", params.sigma_se),
                                (j, v_cities))
        small = sigma < _SIGMA_TINY
        sig2 = np.where(small, 1.0, sigma**2)
        dt = (t_to - t_from) / steps_per_obs
        # everything constant across substeps is prepared once; the loop body
        # must still consume the generator in the documented order
        uniform_noise = sig2.flat[0]
        if np.all(sig2 == uniform_noise):
            gamma_args = (float(dt / uniform_noise), float(uniform_noise / dt),
                          (j, v_cities))
        else:
            gamma_args = (dt / sig2, sig2 / dt)
        clamp_noise = bool(small.any())
        plain_mixing = bool(np.all(alpha == 1.0))  # x ** 1.0 == x exactly
        boost = 1.0 + params.theta_amp * (1.0 - params.term_frac) / params.term_frac
        beta_term = (boost * r0) * params.mu_ir
        beta_vac = ((1.0 - params.theta_amp) * r0) * params.mu_ir
        mu_death = np.float64(params.mu_death)
        p_e1, p_e2c = _exit_probs(np.float64(params.mu_ei), mu_death, dt)
        p_i1, p_i2c = _exit_probs(np.float64(params.mu_ir), mu_death, dt)
        birth_mean = np.broadcast_to(births_per_year * dt, (j, v_cities))
        for k in range(steps_per_obs):
            t = t_from + k * dt
            xi = gen.gamma(*gamma_args)
            if clamp_noise:
                xi = np.where(small, 1.0, xi)
            beta = beta_term if (t % 1.0) < params.term_frac else beta_vac
            i_float = i.astype(float)
            q = i_float / pop if plain_mixing else (i_float / pop) ** alpha
            if params.iota == 0:
                own = q
            elif plain_mixing:
                own = (i_float + params.iota) / pop
            else:
                own = ((i_float + params.iota) / pop) ** alpha
            coupling = (q @ travel - q * travel_colsum) / pop
            lam = np.maximum(beta * (own + coupling), 0.0)
            p_s1, p_s2c = _exit_probs(lam * xi, mu_death, dt)
            n_se = gen.binomial(s, p_s1)
            rem_s = s - n_se
            n_sd = gen.binomial(rem_s, p_s2c)
            n_ei = gen.binomial(e, p_e1)
            rem_e = e - n_ei
            n_ed = gen.binomial(rem_e, p_e2c)
            n_ir = gen.binomial(i, p_i1)
            rem_i = i - n_ir
            n_id = gen.binomial(rem_i, p_i2c)
            births = gen.poisson(birth_mean)
            s = rem_s - n_sd
            e = rem_e + n_se - n_ed
            i = rem_i + n_ei - n_id
            space = (pop_floor[None, :] - (s + e + i)).astype(np.int64)
            s = s + np.minimum(births, np.maximum(space, 0))
            z += n_ir
        out = np.empty_like(x)
        out[:, :, 0] = s
        out[:, :, 1] = e
        out[:, :, 2] = i
        out[:, :, 3] = z
        return out.reshape(j, v_cities * 4)

    def _moments(x_v):
        zc = np.maximum(x_v[:, 3], 0.0)
        mean = rho * zc
        var = rho * (1.0 - rho) * zc + (psi * rho * zc) ** 2 + v_floor
        return mean, var

    def dmeasure_unit(vtx, y_v, x_v, swarm):
        y = float(np.asarray(y_v).reshape(-1)[0])
        mean, var = _moments(x_v)
        sd = np.sqrt(var)
        hi = (y + 0.5 - mean) / sd
        if y < 0.5:  # the zero cell absorbs the whole lower tail
            prob = ndtr(hi)
        else:
            lo = (y - 0.5 - mean) / sd
            prob = np.maximum(ndtr(hi) - ndtr(lo), ndtr(-lo) - ndtr(-hi))
        out = np.full(x_v.shape[0], LOG_ZERO)
        pos = prob > 0
        out[pos] = np.log(prob[pos])
        return out

    def emeasure_unit(vtx, x_v, swarm):
        mean, var = _moments(x_v)
        return mean[:, None], var[:, None]

    def rmeasure_unit(vtx, x_v, swarm, rng):
        mean, var = _moments(x_v)
        w = mean + np.sqrt(var) * rng.generator().standard_normal(x_v.shape[0])
        return np.maximum(np.floor(w + 0.5), 0.0)[:, None]

    def project_state(states, t):
        return np.maximum(np.rint(states), 0.0)

    return ModelContract(
        state_layout=StateLayout.uniform(v_cities, 4),
        rinit=rinit,
        rprocess=rprocess,
        dmeasure_unit=dmeasure_unit,
        emeasure_unit=emeasure_unit,
        rmeasure_unit=rmeasure_unit,
        project_state=project_state,
        layout=layout,
    )


def biweekly_times(covariates: CityCovariates, n_years: int, per_year: int = 26) -> np.ndarray:
    n = n_years * per_year
    return covariates.t0 + (np.arange(n) + 1) / per_year


def simulate_dataset(params: MeaslesParams, covariates: CityCovariates, rng,
                     n_years: int = 15, per_year: int = 26, steps_per_obs: int = 7,
                     v_floor: float = 1.0):
    """One synthetic case-count panel at the generating parameters.

    Returns (ObservationSeries, latent trajectory (N, 4 * n_cities)).
    """
    model = build_measles_model(params, covariates, "case1",
                                steps_per_obs=steps_per_obs, v_floor=v_floor)
    graph = measles_graph(covariates)
    theta = truth_field(params, model.layout)
    times = biweekly_times(covariates, n_years, per_year)
    return simulate(model, graph, times, theta, rng, t0=covariates.t0)
