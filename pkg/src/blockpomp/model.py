"""Core data model: states, observations, parameters, and the model contract.

All particle-indexed arrays carry a leading J axis. Parameter fields split
into unit-specific coordinates (one value per vertex) and shared coordinates
(one value per field); every coordinate declares a transform to the
unconstrained scale and an IVP flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logit as _logit

from .rng import PROBE, RngNode, as_node

# Log-zero sentinel: the IEEE -inf bit pattern used strictly as a flag.
# Code must mask sentinel entries before arithmetic; helpers below do so.
LOG_ZERO = -np.inf


def is_log_zero(x) -> np.ndarray:
    return np.isneginf(x)


TRANSFORMS = ("identity", "log", "logit")


def to_unconstrained(x, transform: str):
    if transform == "identity":
        return np.asarray(x, dtype=float)
    if transform == "log":
        return np.log(x)
    if transform == "logit":
        return _logit(x)
    raise ValueError(f"unknown transform {transform!r}")


def to_natural(z, transform: str):
    if transform == "identity":
        return np.asarray(z, dtype=float)
    if transform == "log":
        return np.exp(z)
    if transform == "logit":
        return expit(z)
    raise ValueError(f"unknown transform {transform!r}")


@dataclass(frozen=True)
class ParamSpec:
    """One parameter coordinate: name, transform tag, IVP flag."""

    name: str
    transform: str = "identity"
    ivp: bool = False

    def __post_init__(self):
        if self.transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {self.transform!r}")


@dataclass(frozen=True)
class ParameterLayout:
    """Coordinate layout shared by every field in a swarm."""

    unit: tuple[ParamSpec, ...] = ()
    shared: tuple[ParamSpec, ...] = ()

    def __post_init__(self):
        names = [s.name for s in self.unit] + [s.name for s in self.shared]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    @property
    def unit_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.unit)

    @property
    def shared_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.shared)

    def unit_index(self, name: str) -> int:
        return self.unit_names.index(name)

    def shared_index(self, name: str) -> int:
        return self.shared_names.index(name)

    @property
    def n_unit(self) -> int:
        return len(self.unit)

    @property
    def n_shared(self) -> int:
        return len(self.shared)

    def learned_count(self, n_vertices: int) -> int:
        return self.n_unit * n_vertices + self.n_shared


@dataclass(frozen=True)
class UnitParameterField:
    """One parameter field: per-vertex values plus shared values."""

    layout: ParameterLayout
    unit_values: np.ndarray  # (V, n_unit)
    shared_values: np.ndarray  # (n_shared,)

    def __post_init__(self):
        u = np.atleast_2d(np.asarray(self.unit_values, dtype=float))
        if self.layout.n_unit == 0:
            u = u.reshape(max(u.shape[0], 1), 0) if u.size == 0 else u.reshape(-1, 0)
        s = np.asarray(self.shared_values, dtype=float).reshape(-1)
        if u.shape[1] != self.layout.n_unit:
            raise ValueError("unit value columns do not match layout")
        if s.shape[0] != self.layout.n_shared:
            raise ValueError("shared values do not match layout")
        object.__setattr__(self, "unit_values", u)
        object.__setattr__(self, "shared_values", s)

    @property
    def n_vertices(self) -> int:
        return self.unit_values.shape[0]

    def unit(self, name: str) -> np.ndarray:
        return self.unit_values[:, self.layout.unit_index(name)]

    def shared(self, name: str) -> float:
        return float(self.shared_values[self.layout.shared_index(name)])


class ParameterSwarm:
    """J parameter fields sharing one layout.

    Attributes:
        unit: array (J, V, n_unit) of unit-specific values (natural scale).
        shared: array (J, n_shared) of shared values (natural scale).
        iteration: index m of the learning iteration that produced the swarm.
    """

    def __init__(self, layout: ParameterLayout, unit: np.ndarray, shared: np.ndarray,
                 iteration: int = 0):
        self.layout = layout
        self.unit = np.asarray(unit, dtype=float)
        self.shared = np.asarray(shared, dtype=float)
        if self.unit.ndim != 3 or self.unit.shape[2] != layout.n_unit:
            raise ValueError("unit array must be (J, V, n_unit)")
        if self.shared.ndim != 2 or self.shared.shape[1] != layout.n_shared:
            raise ValueError("shared array must be (J, n_shared)")
        if self.shared.shape[0] != self.unit.shape[0]:
            raise ValueError("unit and shared J mismatch")
        self.iteration = int(iteration)

    @property
    def J(self) -> int:
        return self.unit.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.unit.shape[1]

    def copy(self, iteration: Optional[int] = None) -> "ParameterSwarm":
        it = self.iteration if iteration is None else iteration
        return ParameterSwarm(self.layout, self.unit.copy(), self.shared.copy(), it)

    def unit_view(self, name: str) -> np.ndarray:
        """(J, V) values of one unit-specific coordinate."""
        return self.unit[:, :, self.layout.unit_index(name)]

    def shared_view(self, name: str) -> np.ndarray:
        """(J,) values of one shared coordinate."""
        return self.shared[:, self.layout.shared_index(name)]

    def has(self, name: str) -> bool:
        return name in self.layout.unit_names or name in self.layout.shared_names

    @classmethod
    def point(cls, fld: UnitParameterField, J: int, iteration: int = 0) -> "ParameterSwarm":
        unit = np.repeat(fld.unit_values[None, :, :], J, axis=0)
        shared = np.repeat(fld.shared_values[None, :], J, axis=0)
        return cls(fld.layout, unit, shared, iteration)

    @classmethod
    def from_boxes(cls, layout: ParameterLayout, boxes: dict, J: int, n_vertices: int,
                   rng) -> "ParameterSwarm":
        """J independent uniform draws per coordinate from natural-scale boxes.

        Unit coordinates draw independently per vertex; shared coordinates
        draw once per field. Draw order follows the layout, so the result
        depends only on (layout, boxes, J, n_vertices, stream).
        """
        gen = as_node(rng).generator()
        unit = np.empty((J, n_vertices, layout.n_unit))
        for c, spec in enumerate(layout.unit):
            lo, hi = boxes[spec.name]
            unit[:, :, c] = gen.uniform(lo, hi, size=(J, n_vertices))
        shared = np.empty((J, layout.n_shared))
        for c, spec in enumerate(layout.shared):
            lo, hi = boxes[spec.name]
            shared[:, c] = gen.uniform(lo, hi, size=J)
        return cls(layout, unit, shared, iteration=0)

    def mean_field(self) -> UnitParameterField:
        """Swarm mean per coordinate on the transformed scale, mapped back."""
        unit = np.empty((self.n_vertices, self.layout.n_unit))
        for c, spec in enumerate(self.layout.unit):
            z = to_unconstrained(self.unit[:, :, c], spec.transform)
            unit[:, c] = to_natural(z.mean(axis=0), spec.transform)
        shared = np.empty(self.layout.n_shared)
        for c, spec in enumerate(self.layout.shared):
            z = to_unconstrained(self.shared[:, c], spec.transform)
            shared[c] = to_natural(z.mean(), spec.transform)
        return UnitParameterField(self.layout, unit, shared)

    def select(self, idx: np.ndarray) -> "ParameterSwarm":
        return ParameterSwarm(self.layout, self.unit[idx], self.shared[idx], self.iteration)


@dataclass(frozen=True)
class StateLayout:
    """Per-vertex state dimensions packed into one flat axis."""

    dims: tuple[int, ...]

    def __post_init__(self):
        if any(d < 1 for d in self.dims):
            raise ValueError("state dimensions must be positive")

    @property
    def n_vertices(self) -> int:
        return len(self.dims)

    @property
    def total_dim(self) -> int:
        return int(sum(self.dims))

    @property
    def offsets(self) -> tuple[int, ...]:
        out, acc = [], 0
        for d in self.dims:
            out.append(acc)
            acc += d
        return tuple(out)

    def slc(self, v: int) -> slice:
        off = self.offsets[v]
        return slice(off, off + self.dims[v])

    def columns(self, vertices) -> np.ndarray:
        cols = []
        for v in vertices:
            s = self.slc(v)
            cols.extend(range(s.start, s.stop))
        return np.asarray(cols, dtype=int)

    @classmethod
    def uniform(cls, n_vertices: int, dim: int = 1) -> "StateLayout":
        return cls(tuple([dim] * n_vertices))


@dataclass
class LatentFieldState:
    """J latent fields at one time index, packed as (J, total_dim)."""

    layout: StateLayout
    values: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] != self.layout.total_dim:
            raise ValueError("state array must be (J, total_dim)")

    @property
    def J(self) -> int:
        return self.values.shape[0]

    def vertex(self, v: int) -> np.ndarray:
        return self.values[:, self.layout.slc(v)]


@dataclass(frozen=True)
class ObservationSeries:
    """Rectangular observations: values (N_time, V, obs_dim), strictly increasing times."""

    times: np.ndarray
    values: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError("values must be (N_time, V) or (N_time, V, obs_dim)")
        if t.shape[0] != v.shape[0]:
            raise ValueError("times and values length mismatch")
        if t.shape[0] == 0:
            raise ValueError("empty series")
        full = np.concatenate([[self.t0], t])
        if not np.all(np.diff(full) > 0):
            raise ValueError("times must be strictly increasing from t0")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_vertices(self) -> int:
        return self.values.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.values.shape[2]

    def interval(self, n: int) -> tuple[float, float]:
        """(t_{n-1}, t_n) for 1-based step n."""
        lo = self.t0 if n == 1 else float(self.times[n - 2])
        return lo, float(self.times[n - 1])


@dataclass(frozen=True)
class ModelContract:
    """Plug-and-play model callbacks consumed by every filter.

    rprocess is a black-box simulator: no transition density is ever
    requested. All callbacks are vectorized over the leading J axis and must
    be pure given (inputs, rng node).

    Fields:
        state_layout: per-vertex state dimensions.
        rinit(theta_swarm, J, rng) -> (J, total_dim) states at time t0.
        rprocess(states, theta_swarm, t_from, t_to, rng) -> (J, total_dim).
        dmeasure_unit(v, y_v, x_v, theta_swarm) -> (J,) log-densities,
            finite or the log-zero sentinel.
        emeasure_unit(v, x_v, theta_swarm) -> ((J, obs_dim) means,
            (J, obs_dim) variances); optional, required by EnKF.
        rmeasure_unit(v, x_v, theta_swarm, rng) -> (J, obs_dim) draws;
            optional, required by dataset simulation.
        project_state(states, t) -> states; optional hook restoring state
            constraints after Gaussian ensemble updates.
        layout: parameter layout the callbacks expect.
        obs_dim: per-vertex observation dimension.
    """

    state_layout: StateLayout
    rinit: Callable
    rprocess: Callable
    dmeasure_unit: Callable
    layout: ParameterLayout = ParameterLayout()
    emeasure_unit: Optional[Callable] = None
    rmeasure_unit: Optional[Callable] = None
    project_state: Optional[Callable] = None
    obs_dim: int = 1

    @property
    def n_vertices(self) -> int:
        return self.state_layout.n_vertices


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # "error" | "warning"
    where: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple[ValidationIssue, ...]
    state_dims: tuple[int, ...]

    def errors(self) -> tuple[ValidationIssue, ...]:
        return tuple(i for i in self.issues if i.severity == "error")


def validate_model(model: ModelContract, graph, theta, rng, t_probe: Optional[tuple] = None,
                   sample_obs=None, J: int = 8) -> ValidationReport:
    """Smoke-run the contract and report structural problems.

    Runs rinit and one rprocess step, then evaluates dmeasure_unit at every
    vertex on a probe observation (caller-supplied, else simulated via
    rmeasure_unit, else the emeasure mean, else zeros). Callback failures
    surface as structured issues instead of propagating.
    """
    node = as_node(rng).child(PROBE)
    issues: list[ValidationIssue] = []
    layout = model.state_layout
    if layout.n_vertices != graph.n_vertices:
        issues.append(ValidationIssue("error", "state_layout",
                                      f"{layout.n_vertices} vertex dims for "
                                      f"{graph.n_vertices} graph vertices"))
        return ValidationReport(False, tuple(issues), layout.dims)

    swarm = theta if isinstance(theta, ParameterSwarm) else ParameterSwarm.point(theta, J)
    if swarm.J != J:
        J = swarm.J
    t0, t1 = t_probe if t_probe is not None else (0.0, 1.0)

    try:
        states = model.rinit(swarm, J, node.child(0))
    except Exception as e:  # noqa: BLE001 - surfaced as a validation issue
        issues.append(ValidationIssue("error", "rinit", f"raised {type(e).__name__}: {e}"))
        return ValidationReport(False, tuple(issues), layout.dims)
    states = np.asarray(states)
    if states.shape != (J, layout.total_dim):
        issues.append(ValidationIssue("error", "rinit",
                                      f"returned shape {states.shape}, expected "
                                      f"{(J, layout.total_dim)}"))
        return ValidationReport(False, tuple(issues), layout.dims)
    if not np.all(np.isfinite(states)):
        issues.append(ValidationIssue("error", "rinit", "non-finite state values"))

    try:
        states = np.asarray(model.rprocess(states, swarm, t0, t1, node.child(1)))
    except Exception as e:  # noqa: BLE001
        issues.append(ValidationIssue("error", "rprocess", f"raised {type(e).__name__}: {e}"))
        return ValidationReport(False, tuple(issues), layout.dims)
    if states.shape != (J, layout.total_dim):
        issues.append(ValidationIssue("error", "rprocess",
                                      f"returned shape {states.shape}"))
        return ValidationReport(False, tuple(issues), layout.dims)
    if not np.all(np.isfinite(states)):
        issues.append(ValidationIssue("error", "rprocess", "non-finite state values"))

    for v in range(graph.n_vertices):
        x_v = states[:, layout.slc(v)]
        y_v = None
        if sample_obs is not None:
            y_v = np.asarray(sample_obs[v]).reshape(-1)
        elif model.rmeasure_unit is not None:
            try:
                y_v = np.asarray(model.rmeasure_unit(v, x_v, swarm, node.child(2, v)))[0]
            except Exception as e:  # noqa: BLE001
                issues.append(ValidationIssue("error", f"rmeasure_unit[{graph.vertices[v]}]",
                                              f"raised {type(e).__name__}: {e}"))
                continue
        elif model.emeasure_unit is not None:
            try:
                y_v = np.asarray(model.emeasure_unit(v, x_v, swarm)[0])[0]
            except Exception as e:  # noqa: BLE001
                issues.append(ValidationIssue("error", f"emeasure_unit[{graph.vertices[v]}]",
                                              f"raised {type(e).__name__}: {e}"))
                continue
        else:
            y_v = np.zeros(model.obs_dim)
        try:
            ld = np.asarray(model.dmeasure_unit(v, y_v, x_v, swarm), dtype=float)
        except Exception as e:  # noqa: BLE001
            issues.append(ValidationIssue("error", f"dmeasure_unit[{graph.vertices[v]}]",
                                          f"raised {type(e).__name__}: {e}"))
            continue
        if ld.shape != (J,):
            issues.append(ValidationIssue("error", f"dmeasure_unit[{graph.vertices[v]}]",
                                          f"returned shape {ld.shape}, expected {(J,)}"))
        elif np.any(np.isnan(ld)) or np.any(np.isposinf(ld)):
            issues.append(ValidationIssue("error", f"dmeasure_unit[{graph.vertices[v]}]",
                                          "NaN or +inf log-density (log-zero must use the sentinel)"))

    ok = not any(i.severity == "error" for i in issues)
    return ValidationReport(ok, tuple(issues), layout.dims)
