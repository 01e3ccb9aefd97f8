"""Optimal stratification of sampling frames by genetic search."""

from .bethel import Allocation, AllocationError, bethel, bethel_arrays, expected_cv
from .evaluation import EvaluationReport, eval_solution, scale_allocation, select_sample, synth_frame
from .frame import (
    ColumnMapping,
    PrecisionConstraints,
    SamplingFrame,
    ValidationReport,
    load_constraints,
    load_frame,
    validate,
    write_constraints,
    write_frame,
)
from .optimizer import GAParams, Solution, SpatialParams, build_atomic_strata, kmeans_solution, optimize
from .stats import (
    ModelSpec,
    StratumSummary,
    anticipate,
    anticipated_sd,
    compute_gamma,
    morans_i,
    spatial_stratum_sd,
    summarize,
)

__version__ = "0.1.0"
