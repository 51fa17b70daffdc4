"""Plug-and-play inference for graph-indexed partially observed Markov processes.

Core pieces: a model contract (simulator plus per-vertex measurement
densities), particle filters with global or per-block resampling, iterated
filtering for parameter learning, ensemble Kalman baselines, exact oracles
for verification, an error-bound calculator, and a spatiotemporal measles
benchmark.
"""

from .filters import (
    DegenerateWeightsError,
    FilterNumericalError,
    FilterOutput,
    bpf_run,
    effective_sample_size,
    enkf_run,
    log_mean_exp,
    multinomial_resample,
    normalized_weights,
    pf_run,
    resample_indices,
    simulate,
    systematic_resample,
)
from .graph import (
    BlockPartition,
    SpatialGraph,
    block_distance,
    boundary_vertices,
    build_contiguous_partition,
    complete_graph,
    graph_stats,
    path_graph,
    whole_graph_partition,
)
from .learning import (
    CoolingSchedule,
    LearnResult,
    MetricResult,
    PerturbationKernel,
    TraceRecord,
    evaluate_metrics,
    ibpf_run,
    ienkf_run,
    if2_run,
)
from .measles import (
    CityCovariates,
    MeaslesParams,
    build_measles_model,
    case_layout,
    measles_graph,
    simulate_dataset,
    truth_field,
)
from .model import (
    LOG_ZERO,
    LatentFieldState,
    ModelContract,
    ObservationSeries,
    ParamSpec,
    ParameterLayout,
    ParameterSwarm,
    StateLayout,
    UnitParameterField,
    validate_model,
)
from .oracles import (
    BoundInputs,
    BoundReport,
    DiscreteHMMModel,
    LinearGaussianLatticeModel,
    bound_calculator,
    enumerate_exact_blocked_filter,
    enumerate_exact_filter,
    kalman_exact_loglik,
)
from .rng import RngNode

__version__ = "0.1.0"

__all__ = [
    "LOG_ZERO",
    "BlockPartition",
    "BoundInputs",
    "BoundReport",
    "CityCovariates",
    "CoolingSchedule",
    "DegenerateWeightsError",
    "DiscreteHMMModel",
    "FilterNumericalError",
    "FilterOutput",
    "LatentFieldState",
    "LearnResult",
    "LinearGaussianLatticeModel",
    "MeaslesParams",
    "MetricResult",
    "ModelContract",
    "ObservationSeries",
    "ParamSpec",
    "ParameterLayout",
    "ParameterSwarm",
    "PerturbationKernel",
    "RngNode",
    "SpatialGraph",
    "StateLayout",
    "TraceRecord",
    "UnitParameterField",
    "block_distance",
    "bound_calculator",
    "boundary_vertices",
    "bpf_run",
    "build_contiguous_partition",
    "build_measles_model",
    "case_layout",
    "complete_graph",
    "effective_sample_size",
    "enkf_run",
    "enumerate_exact_blocked_filter",
    "enumerate_exact_filter",
    "evaluate_metrics",
    "graph_stats",
    "ibpf_run",
    "ienkf_run",
    "if2_run",
    "kalman_exact_loglik",
    "log_mean_exp",
    "measles_graph",
    "multinomial_resample",
    "normalized_weights",
    "path_graph",
    "pf_run",
    "resample_indices",
    "simulate",
    "simulate_dataset",
    "systematic_resample",
    "truth_field",
    "validate_model",
    "whole_graph_partition",
]
