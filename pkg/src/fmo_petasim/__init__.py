"""Cost modelling, calibration and scheduling simulation for fragment-decomposed
quantum-chemistry workloads, plus a classical surrogate of the FMO2 algorithm."""

from .costmodel import (
    PUBLISHED_PARAMS,
    CostParameters,
    MachineSpec,
    WorkBreakdown,
    effective_flops,
    nd_model,
    nes_model,
    pair_array_bytes,
    predict_elapsed,
    shape_from_nf,
    work_total,
)
from .fragments import (
    Fragment,
    FragmentSystem,
    PairClassification,
    Site,
    WorkloadShape,
    classify_pairs,
    generate_chain,
    workload_shape,
)

__all__ = [
    "PUBLISHED_PARAMS",
    "CostParameters",
    "MachineSpec",
    "WorkBreakdown",
    "effective_flops",
    "nd_model",
    "nes_model",
    "pair_array_bytes",
    "predict_elapsed",
    "shape_from_nf",
    "work_total",
    "Fragment",
    "FragmentSystem",
    "PairClassification",
    "Site",
    "WorkloadShape",
    "classify_pairs",
    "generate_chain",
    "workload_shape",
]

__version__ = "0.1.0"
