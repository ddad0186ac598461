"""Least-squares calibration of the cost model from measured phase timings.

The observable is the total wall time of each phase (monomer, SCF-dimer,
ES-dimer) for each timing record. For a record on machine ``m`` with ``K``
workers the model predicts ``work_phase(shape, params) / (K * E_m)``. The
residual is taken relative to the measurement so that runs spanning several
orders of magnitude get equal weight.

The problem is bilinear in (params, 1/E). It is solved by alternating two
exact sub-problems: a linear least-squares solve for the parameters of each
phase with efficiencies fixed, and a one-dimensional closed form for each
non-reference machine's 1/E with parameters fixed. The reference machine's
efficiency stays pinned at 1, which removes the scale gauge.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls

from .costmodel import CostParameters, work_dimer, work_es, work_monomer
from .errors import ConvergenceError, IdentifiabilityError, ParseError, ValidationError
from .fragments import WorkloadShape

__all__ = [
    "TimingRecord",
    "CalibrationResult",
    "CSV_HEADER",
    "PHASES",
    "fit",
    "fit_nd",
    "residual_report",
    "evaluate",
    "read_records",
    "parse_records",
    "write_records",
    "synthetic_records",
]

PHASES = ("monomer", "scf_dimer", "es_dimer")
CSV_HEADER = (
    "machine_id", "k", "n_f", "i_m", "n_d", "n_es",
    "t_monomer", "t_scf_dimer", "t_es_dimer", "t_total",
)


@dataclass(frozen=True)
class TimingRecord:
    machine_id: str
    k: int
    shape: WorkloadShape
    t_monomer: float
    t_scf_dimer: float
    t_es_dimer: float
    t_total: float

    def __post_init__(self):
        times = (self.t_monomer, self.t_scf_dimer, self.t_es_dimer, self.t_total)
        if not all(t > 0 for t in times):
            raise ValidationError(f"{self.machine_id}: all times must be positive")
        if self.t_total < max(times[:3]):
            raise ValidationError(f"{self.machine_id}: t_total below a phase time")
        if self.k < 1:
            raise ValidationError("k must be >= 1")

    def phase_time(self, phase: str) -> float:
        return getattr(self, f"t_{phase}")


@dataclass
class CalibrationResult:
    params: CostParameters
    efficiencies: dict[str, float]
    residuals: list[dict[str, float]]
    objective: float
    rounds: int = 0
    history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "efficiencies": dict(self.efficiencies),
            "objective": self.objective,
            "rounds": self.rounds,
            "residuals": self.residuals,
        }


# --- design matrices ------------------------------------------------------------


def _features(phase: str, s: WorkloadShape) -> np.ndarray:
    if phase == "monomer":
        return np.array([s.n_f * s.i_m, s.n_f * s.n_f * s.i_m], dtype=float)
    if phase == "scf_dimer":
        return np.array([s.n_d, s.n_f * s.n_d], dtype=float)
    return np.array([s.n_es], dtype=float)


def _phase_work(phase: str, s: WorkloadShape, p: CostParameters) -> float:
    if phase == "monomer":
        return work_monomer(s, p)
    if phase == "scf_dimer":
        return work_dimer(s, p)
    return work_es(s, p)


def _pack(theta: dict[str, np.ndarray], nd_slope: float) -> CostParameters:
    return CostParameters(
        f_m0=float(theta["monomer"][0]),
        f_m1=float(theta["monomer"][1]),
        f_d0=float(theta["scf_dimer"][0]),
        f_d1=float(theta["scf_dimer"][1]),
        f_es0=float(theta["es_dimer"][0]),
        nd_slope=nd_slope,
    )


def _relative_residuals(records, p: CostParameters, eff: dict[str, float]) -> np.ndarray:
    out = []
    for r in records:
        scale = r.k * eff[r.machine_id]
        for phase in PHASES:
            out.append(_phase_work(phase, r.shape, p) / scale / r.phase_time(phase) - 1.0)
    return np.array(out)


def _objective(records, p, eff) -> float:
    res = _relative_residuals(records, p, eff)
    return float(res @ res)


def _check_identifiable(records: Sequence[TimingRecord]) -> None:
    if len({r.shape.n_f for r in records}) < 2:
        raise IdentifiabilityError("need timing records at two or more distinct N_f")
    for phase in PHASES:
        x = np.array([_features(phase, r.shape) for r in records])
        x = x / np.abs(x).max(axis=0, where=x != 0, initial=1.0)
        if np.linalg.matrix_rank(x) < x.shape[1]:
            raise IdentifiabilityError(f"{phase} parameters are not identifiable from these records")


def _params_step(records, eff) -> dict[str, np.ndarray]:
    theta = {}
    for phase in PHASES:
        rows = np.array([
            _features(phase, r.shape) / (r.k * eff[r.machine_id] * r.phase_time(phase))
            for r in records
        ])
        ones = np.ones(len(records))
        sol, *_ = np.linalg.lstsq(rows, ones, rcond=None)
        if np.any(sol < 0):
            sol, _ = nnls(rows, ones)
        theta[phase] = sol
    return theta


def _efficiency_step(records, p, eff, reference) -> dict[str, float]:
    new = dict(eff)
    for machine in sorted(eff):
        if machine == reference:
            continue
        ratios = [
            _phase_work(phase, r.shape, p) / r.k / r.phase_time(phase)
            for r in records if r.machine_id == machine
            for phase in PHASES
        ]
        ratios = np.array(ratios)
        # minimise sum (s * ratio - 1)^2 over s = 1 / E
        s = ratios.sum() / (ratios @ ratios)
        new[machine] = float(1.0 / s)
    return new


def fit(records: Sequence[TimingRecord], reference: str, *, rtol: float = 1e-12,
        max_rounds: int = 500) -> CalibrationResult:
    """Fit cost parameters and per-machine efficiencies to phase timings."""
    records = list(records)
    machines = {r.machine_id for r in records}
    if reference not in machines:
        raise ValidationError(f"reference machine {reference!r} has no records")
    _check_identifiable(records)

    nd_slope = fit_nd(records)
    eff = {m: 1.0 for m in machines}
    history = []
    p = None
    converged = False
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        p = _pack(_params_step(records, eff), nd_slope)
        after_params = _objective(records, p, eff)
        eff = _efficiency_step(records, p, eff, reference)
        obj = _objective(records, p, eff)
        # each block update is an exact minimisation, so descent must hold
        if obj > after_params * (1 + 1e-9) + 1e-300 or (
            history and after_params > history[-1] * (1 + 1e-9) + 1e-300
        ):
            raise ConvergenceError(
                "objective increased during alternating least squares",
                {"round": rounds, "history": history + [after_params, obj]},
            )
        prev = history[-1] if history else math.inf
        history.append(obj)
        if obj < 1e-28 or (math.isfinite(prev) and abs(prev - obj) <= rtol * prev):
            converged = True
            break
        if len(machines) == 1:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"calibration did not converge in {max_rounds} rounds",
            {"history": history[-10:], "params": p.to_dict(), "efficiencies": eff},
        )
    result = evaluate(p, eff, records)
    result.rounds = rounds
    result.history = history
    return result


def evaluate(params: CostParameters, efficiencies: dict[str, float],
             records: Sequence[TimingRecord]) -> CalibrationResult:
    """Residuals and objective of given parameters against records."""
    rows = []
    for r in records:
        scale = r.k * efficiencies[r.machine_id]
        row = {"machine_id": r.machine_id, "n_f": r.shape.n_f}
        for phase in PHASES:
            row[phase] = _phase_work(phase, r.shape, params) / scale / r.phase_time(phase) - 1.0
        rows.append(row)
    obj = math.fsum(row[ph] ** 2 for row in rows for ph in PHASES)
    return CalibrationResult(params, dict(efficiencies), rows, obj)


def fit_nd(records: Iterable) -> float:
    """Zero-intercept least-squares slope of N_d against N_f.

    Accepts timing records or bare workload shapes.
    """
    shapes = [getattr(r, "shape", r) for r in records]
    num = sum(s.n_f * s.n_d for s in shapes)
    den = sum(s.n_f * s.n_f for s in shapes)
    if den == 0:
        raise ValidationError("fit_nd needs at least one record with N_f > 0")
    return num / den


def residual_report(result: CalibrationResult, records: Sequence[TimingRecord]) -> list[dict]:
    """Measured against modelled times per record and phase.

    Per-task averages are given in both normalisations seen in published
    tables: monomer time per (fragment x loop) and per fragment.
    """
    out = []
    p = result.params
    for r in records:
        scale = r.k * result.efficiencies[r.machine_id]
        s = r.shape
        row = {"machine_id": r.machine_id, "k": r.k, "n_f": s.n_f}
        total_model = 0.0
        for phase in PHASES:
            model = _phase_work(phase, s, p) / scale
            total_model += model
            measured = r.phase_time(phase)
            row[f"{phase}_measured"] = measured
            row[f"{phase}_model"] = model
            row[f"{phase}_rel_err"] = model / measured - 1.0
        row["total_measured"] = r.t_total
        row["total_model"] = total_model
        row["total_rel_err"] = total_model / r.t_total - 1.0
        row["monomer_avg_per_loop"] = r.t_monomer / (s.n_f * s.i_m) if s.n_f and s.i_m else math.nan
        row["monomer_avg_per_fragment"] = r.t_monomer / s.n_f if s.n_f else math.nan
        row["scf_dimer_avg"] = r.t_scf_dimer / s.n_d if s.n_d else math.nan
        row["es_dimer_avg"] = r.t_es_dimer / s.n_es if s.n_es else math.nan
        out.append(row)
    return out


# --- CSV ------------------------------------------------------------------------


def parse_records(text: str) -> list[TimingRecord]:
    reader = csv.reader(io.StringIO(text))
    records = []
    header_seen = False
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in row]
        if not header_seen:
            if tuple(cells) != CSV_HEADER:
                raise ParseError(f"expected header {','.join(CSV_HEADER)}", lineno)
            header_seen = True
            continue
        if len(cells) != len(CSV_HEADER):
            raise ParseError(f"expected {len(CSV_HEADER)} fields, got {len(cells)}", lineno)
        try:
            k, n_f, i_m, n_d, n_es = (int(c) for c in cells[1:6])
            times = [float(c) for c in cells[6:]]
            records.append(TimingRecord(cells[0], k, WorkloadShape(n_f, i_m, n_d, n_es), *times))
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from exc
    if not header_seen:
        raise ParseError("empty timing file", 1)
    return records


def read_records(path: str | Path) -> list[TimingRecord]:
    return parse_records(Path(path).read_text())


def write_records(records: Iterable[TimingRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            s = r.shape
            w.writerow([r.machine_id, r.k, s.n_f, s.i_m, s.n_d, s.n_es,
                        repr(r.t_monomer), repr(r.t_scf_dimer), repr(r.t_es_dimer), repr(r.t_total)])


def synthetic_records(params: CostParameters, machines: dict[str, tuple[int, float]],
                      shapes: Sequence[WorkloadShape]) -> list[TimingRecord]:
    """Noise-free records generated from the forward model.

    ``machines`` maps machine id to ``(K, E)``.
    """
    out = []
    for machine_id, (k, e) in machines.items():
        for s in shapes:
            t = [_phase_work(ph, s, params) / (k * e) for ph in PHASES]
            out.append(TimingRecord(machine_id, k, s, *t, math.fsum(t)))
    return out
