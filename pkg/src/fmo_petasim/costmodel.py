"""Phenomenological execution-cost model for FMO runs.

Work is measured in reference-node-seconds: one second of computation on a
node with relative performance E = 1. A run of shape (N_f, I_m, N_d, N_es)
costs

    F_m  = (f_m0 + f_m1 N_f) N_f I_m
    F_d  = (f_d0 + f_d1 N_f) N_d
    F_es = f_es0 N_es

and takes F_total / (K E) seconds on K nodes of relative speed E. The SCF
dimer count is extrapolated as N_d = nd_slope * N_f and the ES count is its
complement within the N_f (N_f - 1) / 2 pairs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

from .errors import ConfigurationError, ValidationError
from .fragments import WorkloadShape

__all__ = [
    "CostParameters",
    "MachineSpec",
    "WorkBreakdown",
    "PUBLISHED_PARAMS",
    "work_monomer",
    "work_dimer",
    "work_es",
    "work_total",
    "nd_model",
    "nes_model",
    "shape_from_nf",
    "predict_elapsed",
    "effective_flops",
    "pair_array_bytes",
]


@dataclass(frozen=True)
class CostParameters:
    f_m0: float
    f_m1: float
    f_d0: float
    f_d1: float
    f_es0: float
    nd_slope: float = 7.50

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value >= 0 and math.isfinite(value)):
                raise ValidationError(f"{name} must be finite and >= 0, got {value!r}")

    def as_vector(self) -> tuple[float, float, float, float, float]:
        return (self.f_m0, self.f_m1, self.f_d0, self.f_d1, self.f_es0)

    def with_slope(self, nd_slope: float) -> "CostParameters":
        return replace(self, nd_slope=nd_slope)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CostParameters":
        fields = ("f_m0", "f_m1", "f_d0", "f_d1", "f_es0")
        try:
            kwargs = {k: float(data[k]) for k in fields}
        except KeyError as exc:
            raise ValidationError(f"cost parameters missing {exc.args[0]!r}") from exc
        if "nd_slope" in data:
            kwargs["nd_slope"] = float(data["nd_slope"])
        return cls(**kwargs)


PUBLISHED_PARAMS = CostParameters(f_m0=0.59, f_m1=0.0014, f_d0=2.83, f_d1=0.0039, f_es0=0.082, nd_slope=7.50)


@dataclass(frozen=True)
class MachineSpec:
    k: int
    e: float
    ref_node_flops: float | None = None
    name: str = ""

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError("k must be an integer >= 1")
        if not self.e > 0:
            raise ValidationError("e must be positive")
        object.__setattr__(self, "k", int(self.k))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MachineSpec":
        flops = data.get("ref_node_flops")
        return cls(
            k=int(data["k"]),
            e=float(data["e"]),
            ref_node_flops=None if flops is None else float(flops),
            name=str(data.get("name", "")),
        )


@dataclass(frozen=True)
class WorkBreakdown:
    f_m: float
    f_d: float
    f_es: float

    @property
    def f_total(self) -> float:
        return self.f_m + self.f_d + self.f_es

    def to_dict(self) -> dict:
        return {"f_m": self.f_m, "f_d": self.f_d, "f_es": self.f_es, "f_total": self.f_total}


def monomer_task_work(n_f: int, p: CostParameters) -> float:
    """Work of one monomer SCF inside one SCC iteration."""
    return p.f_m0 + p.f_m1 * n_f


def dimer_task_work(n_f: int, p: CostParameters) -> float:
    return p.f_d0 + p.f_d1 * n_f


def work_monomer(shape: WorkloadShape, p: CostParameters) -> float:
    return monomer_task_work(shape.n_f, p) * shape.n_f * shape.i_m


def work_dimer(shape: WorkloadShape, p: CostParameters) -> float:
    return dimer_task_work(shape.n_f, p) * shape.n_d


def work_es(shape: WorkloadShape, p: CostParameters) -> float:
    return p.f_es0 * shape.n_es


def work_total(shape: WorkloadShape, p: CostParameters) -> WorkBreakdown:
    return WorkBreakdown(work_monomer(shape, p), work_dimer(shape, p), work_es(shape, p))


def nd_model(n_f: int, p: CostParameters = PUBLISHED_PARAMS) -> int:
    """SCF-dimer count from the linear law, rounded half-up, capped at all pairs."""
    if n_f < 0:
        raise ValidationError("n_f must be >= 0")
    n_d = math.floor(p.nd_slope * n_f + 0.5)
    return min(n_d, n_f * (n_f - 1) // 2)


def nes_model(n_f: int, p: CostParameters = PUBLISHED_PARAMS) -> int:
    """ES-dimer count as the complement of ``nd_model`` (never negative)."""
    return max(n_f * (n_f - 1) // 2 - nd_model(n_f, p), 0)


def shape_from_nf(n_f: int, i_m: int, p: CostParameters = PUBLISHED_PARAMS) -> WorkloadShape:
    return WorkloadShape(n_f=n_f, i_m=i_m, n_d=nd_model(n_f, p), n_es=nes_model(n_f, p))


def predict_elapsed(shape: WorkloadShape, p: CostParameters, m: MachineSpec) -> float:
    return work_total(shape, p).f_total / (m.k * m.e)


def effective_flops(m: MachineSpec, achieved_fraction: float = 1.0) -> float:
    if m.ref_node_flops is None:
        raise ConfigurationError(f"machine {m.name or m} has no ref_node_flops")
    return m.k * m.e * m.ref_node_flops * achieved_fraction


def pair_array_bytes(n_f: int) -> int:
    """Bytes of a symmetric double-precision N_f x N_f array (half stored)."""
    if n_f < 0:
        raise ValidationError("n_f must be >= 0")
    return 8 * n_f * n_f // 2
