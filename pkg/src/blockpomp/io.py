"""File formats: versioned CSV tables and JSON documents.

Every CSV starts with the comment line ``#schema=v1`` followed by a header
row. Writers are atomic (temp file then rename) and deterministic: the same
inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import io as _stdio
import json
import os
import tempfile
from typing import Optional, Sequence

import numpy as np

from .model import ObservationSeries, ParameterLayout, UnitParameterField

SCHEMA_LINE = "#schema=v1"


class SchemaError(ValueError):
    """A data file does not match the expected schema."""


def _fmt(value) -> str:
    if isinstance(value, str):
        return value
    if value is None:
        return "NA"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    x = float(value)
    if np.isnan(x):
        return "NA"
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, header: Sequence[str], rows) -> None:
    buf = _stdio.StringIO()
    buf.write(SCHEMA_LINE + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(x) for x in row])
    atomic_write_text(path, buf.getvalue())


def read_csv(path: str):
    """Returns (header, rows) with comment lines skipped; all cells are strings."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise SchemaError(f"{path}: empty table")
    return rows[0], rows[1:]


def write_json(path: str, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Cases (observations), long format: time,city,cases


def write_cases_csv(path: str, data: ObservationSeries, city_names: Sequence[str]) -> None:
    if data.obs_dim != 1:
        raise ValueError("cases files hold scalar per-city observations")
    rows = []
    for n in range(data.n_time):
        for v, name in enumerate(city_names):
            rows.append((data.times[n], name, data.values[n, v, 0]))
    write_csv(path, ("time", "city", "cases"), rows)


def read_cases_csv(path: str, t0: Optional[float] = None):
    """Returns (ObservationSeries, city names in first-appearance order).

    When t0 is omitted it is set one observation interval before the first
    time (matching a series that starts at its regular cadence).
    """
    header, rows = read_csv(path)
    if list(header) != ["time", "city", "cases"]:
        raise SchemaError(f"{path}: expected columns time,city,cases, found {header}")
    names: list = []
    cells: dict = {}
    times_seen: dict = {}
    for time_s, city, cases_s in rows:
        t = float(time_s)
        if city not in cells:
            names.append(city)
            cells[city] = {}
        cells[city][t] = float(cases_s)
        times_seen[t] = None
    times = np.array(sorted(times_seen))
    values = np.empty((times.shape[0], len(names)))
    for v, city in enumerate(names):
        series = cells[city]
        if len(series) != times.shape[0]:
            raise SchemaError(f"{path}: city {city} is missing observations")
        values[:, v] = [series[t] for t in times]
    if t0 is None:
        spacing = float(times[1] - times[0]) if times.shape[0] > 1 else 1.0
        t0 = float(times[0]) - spacing
    return ObservationSeries(times, values, t0=t0), tuple(names)


def write_latent_csv(path: str, times, latent: np.ndarray, columns: Sequence[str]) -> None:
    latent = np.asarray(latent)
    rows = [(t, *latent[n]) for n, t in enumerate(times)]
    write_csv(path, ("time", *columns), rows)


# ---------------------------------------------------------------------------
# Covariates: city,time,population,births plus a distance table


def read_covariates_csv(path: str):
    """Returns (names, population (V,), birth_rate (V,), t0).

    Populations and birth rates may vary over time in the file; the model
    uses one constant value per city, taken as the time average. t0 is the
    earliest listed time.
    """
    header, rows = read_csv(path)
    if list(header) != ["city", "time", "population", "births"]:
        raise SchemaError(f"{path}: expected columns city,time,population,births")
    names: list = []
    pops: dict = {}
    births: dict = {}
    t0 = None
    for city, time_s, pop_s, births_s in rows:
        if city not in pops:
            names.append(city)
            pops[city] = []
            births[city] = []
        pops[city].append(float(pop_s))
        births[city].append(float(births_s))
        t = float(time_s)
        t0 = t if t0 is None else min(t0, t)
    population = np.array([np.mean(pops[c]) for c in names])
    birth_rate = np.array([np.mean(births[c]) for c in names])
    return tuple(names), population, birth_rate, float(t0)


def read_distances_csv(path: str, names: Sequence[str]) -> np.ndarray:
    """Long-format distances city_a,city_b,distance; symmetric completion."""
    header, rows = read_csv(path)
    if list(header) != ["city_a", "city_b", "distance"]:
        raise SchemaError(f"{path}: expected columns city_a,city_b,distance")
    index = {name: i for i, name in enumerate(names)}
    v = len(names)
    d = np.full((v, v), np.nan)
    np.fill_diagonal(d, 0.0)
    for a, b, dist_s in rows:
        if a not in index or b not in index:
            raise SchemaError(f"{path}: unknown city in pair ({a}, {b})")
        val = float(dist_s)
        d[index[a], index[b]] = val
        d[index[b], index[a]] = val
    if np.any(np.isnan(d)):
        i, j = np.argwhere(np.isnan(d))[0]
        raise SchemaError(f"{path}: missing distance for ({names[i]}, {names[j]})")
    return d


# ---------------------------------------------------------------------------
# Parameter files: per-vertex arrays plus shared scalars


def write_params_json(path: str, fld: UnitParameterField, city_names: Sequence[str]) -> None:
    doc = {
        "schema": "v1",
        "cities": list(city_names),
        "unit": {name: [float(x) for x in fld.unit(name)] for name in fld.layout.unit_names},
        "shared": {name: float(fld.shared(name)) for name in fld.layout.shared_names},
    }
    write_json(path, doc)


def read_params_json(path: str, layout: ParameterLayout, city_names: Sequence[str]) -> UnitParameterField:
    """Load a parameter field, validating against the model's layout.

    The file may carry extra coordinates (ignored); a missing coordinate or a
    city-name mismatch is a schema error.
    """
    doc = read_json(path)
    if doc.get("schema") != "v1":
        raise SchemaError(f"{path}: unsupported schema {doc.get('schema')!r}")
    cities = list(doc.get("cities", []))
    if cities != list(city_names):
        raise SchemaError(f"{path}: city list {cities} does not match model {list(city_names)}")
    v = len(cities)
    unit = np.empty((v, layout.n_unit))
    for c, name in enumerate(layout.unit_names):
        if name not in doc.get("unit", {}):
            raise SchemaError(f"{path}: missing unit parameter {name!r}")
        vals = doc["unit"][name]
        if len(vals) != v:
            raise SchemaError(f"{path}: parameter {name!r} has {len(vals)} values for {v} cities")
        unit[:, c] = vals
    shared = np.empty(layout.n_shared)
    for c, name in enumerate(layout.shared_names):
        if name not in doc.get("shared", {}):
            raise SchemaError(f"{path}: missing shared parameter {name!r}")
        shared[c] = float(doc["shared"][name])
    return UnitParameterField(layout, unit, shared)


def write_swarm_json(path: str, swarm, city_names: Sequence[str]) -> None:
    doc = {
        "schema": "v1",
        "cities": list(city_names),
        "iteration": swarm.iteration,
        "J": swarm.J,
        "unit_names": list(swarm.layout.unit_names),
        "shared_names": list(swarm.layout.shared_names),
        "unit": np.asarray(swarm.unit).tolist(),
        "shared": np.asarray(swarm.shared).tolist(),
    }
    write_json(path, doc)


# ---------------------------------------------------------------------------
# Result tables


METRIC_LABELS = {"enkf": "lE", "pf": "lP", "bpf": "lB"}


def write_metrics_csv(path: str, results: dict, J: int) -> None:
    """One row per metric: label, algorithm, raw mean, SE, normalized mean."""
    rows = []
    for name in ("enkf", "pf", "bpf"):
        if name not in results:
            continue
        r = results[name]
        rows.append((METRIC_LABELS[name], name, r.mean, r.se, r.normalized,
                     len(r.values), J))
    write_csv(path, ("metric", "algorithm", "raw", "se", "normalized",
                     "replicates", "J"), rows)


def read_metrics_csv(path: str) -> dict:
    """Returns {metric label: {column: string value}}."""
    header, rows = read_csv(path)
    out = {}
    for row in rows:
        rec = dict(zip(header, row))
        out[rec["metric"]] = rec
    return out


def write_trace_csv(path: str, trace) -> None:
    if not trace:
        write_csv(path, ("iteration", "loglik", "degenerate_cells"), [])
        return
    keys = list(trace[0].param_means)
    header = ["iteration", "loglik", "degenerate_cells"]
    header += [f"mean:{k}" for k in keys] + [f"sd:{k}" for k in keys]
    rows = []
    for rec in trace:
        row = [rec.iteration, rec.loglik, rec.degenerate_cells]
        row += [rec.param_means[k] for k in keys]
        row += [rec.param_sds[k] for k in keys]
        rows.append(row)
    write_csv(path, header, rows)


def write_filter_csv(path: str, algorithm: str, out, J: int) -> None:
    write_csv(path, ("algorithm", "loglik", "normalized", "degenerate_cells",
                     "n_time", "J"),
              [(algorithm, out.loglik,
                out.loglik / out.step_loglik.shape[0] if out.step_loglik.shape[0] else float("nan"),
                out.degenerate_cells, out.step_loglik.shape[0], J)])


def write_filter_steps_csv(path: str, times, out, state_columns: Sequence[str]) -> None:
    """Per-step detail: step log-likelihood, ESS summary, filtered means."""
    if out.ess is None:
        ess_min = [float("nan")] * len(times)
    else:
        ess = np.asarray(out.ess)
        ess_min = ess.tolist() if ess.ndim == 1 else np.nanmin(ess, axis=1).tolist()
    header = ["time", "step_loglik", "ess_min", *[f"mean:{c}" for c in state_columns]]
    rows = []
    for n, t in enumerate(times):
        rows.append((t, out.step_loglik[n], ess_min[n], *out.filtered_means[n]))
    write_csv(path, header, rows)


def format_aligned_table(header: Sequence[str], rows) -> str:
    """Fixed-width text rendering of a small table."""
    cells = [[_fmt(x) for x in row] for row in rows]
    widths = [len(h) for h in header]
    for row in cells:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    def line(parts):
        return "  ".join(p.rjust(w) for p, w in zip(parts, widths))
    out = [line(header)]
    out.append(line(["-" * w for w in widths]))
    out.extend(line(row) for row in cells)
    return "\n".join(out) + "\n"
