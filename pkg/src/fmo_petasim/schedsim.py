"""Discrete-event simulation of FMO task populations on a K-worker cluster.

Tasks come in phases separated by barriers. Within a phase, tasks are handed
out in id order (or longest-first with ``policy="lpt"``) to the worker that
becomes free earliest, ties going to the lowest worker index.

Two interchangeable engines implement this policy. The exact engine replays
every task on a heap of workers and can record an event log. The bulk engine
handles runs of equal-duration tasks by tracking groups of workers that share
a free time, so it scales to billions of tasks; it gives the same makespan up
to floating-point rounding.

Workflow mode chains modules (each with startup, stage-in, body and
stage-out times) along a dependency DAG and injects seeded task failures that
restart a module from its staged inputs.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Sequence

import numpy as np

from .costmodel import (
    CostParameters,
    MachineSpec,
    dimer_task_work,
    monomer_task_work,
    predict_elapsed,
    shape_from_nf,
    work_total,
)
from .errors import ValidationError, WorkflowCycleError
from .fragments import WorkloadShape

__all__ = [
    "TASK_KINDS",
    "Task",
    "TaskBatch",
    "Phase",
    "ClusterConfig",
    "Module",
    "WorkflowSpec",
    "FaultModel",
    "SimReport",
    "build_tasks",
    "expand_tasks",
    "simulate",
    "simulate_workflow",
    "efficiency_sweep",
    "flatten_workflow",
    "workflow_from_dict",
    "workflow_to_dict",
]

TASK_KINDS = ("monomer-iter", "scf-dimer", "es-dimer", "module-overhead", "stage-file")
EXACT_TASK_LIMIT = 5_000_000


@dataclass(frozen=True)
class Task:
    id: int
    kind: str
    duration: float
    phase: int


@dataclass(frozen=True)
class TaskBatch:
    """``count`` consecutive tasks of one kind with ids from ``first_id``.

    Either all tasks share ``duration`` or ``durations`` lists each one.
    """

    kind: str
    count: int
    duration: float = 0.0
    first_id: int = 0
    durations: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValidationError(f"unknown task kind {self.kind!r}")
        if self.count < 0:
            raise ValidationError("task count must be >= 0")
        if self.durations is not None:
            if len(self.durations) != self.count:
                raise ValidationError("durations length differs from count")
            if any(d < 0 for d in self.durations):
                raise ValidationError("task duration must be >= 0")
        elif self.duration < 0:
            raise ValidationError("task duration must be >= 0")

    @property
    def homogeneous(self) -> bool:
        return self.durations is None

    @property
    def work(self) -> float:
        if self.durations is not None:
            return math.fsum(self.durations)
        return self.count * self.duration

    @property
    def max_duration(self) -> float:
        if self.count == 0:
            return 0.0
        return max(self.durations) if self.durations is not None else self.duration

    def tasks(self, phase: int) -> Iterable[Task]:
        for n in range(self.count):
            d = self.durations[n] if self.durations is not None else self.duration
            yield Task(self.first_id + n, self.kind, d, phase)


@dataclass(frozen=True)
class Phase:
    """Barrier-delimited group of tasks."""

    index: int
    batches: tuple[TaskBatch, ...]
    label: str = ""

    @property
    def n_tasks(self) -> int:
        return sum(b.count for b in self.batches)

    @property
    def work(self) -> float:
        return math.fsum(b.work for b in self.batches)

    @property
    def max_duration(self) -> float:
        return max((b.max_duration for b in self.batches), default=0.0)


@dataclass(frozen=True)
class ClusterConfig:
    k: int
    e: float = 1.0
    dispatch_overhead: float = 0.0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError("k must be an integer >= 1")
        if not self.e > 0:
            raise ValidationError("e must be positive")
        if not self.dispatch_overhead >= 0:
            raise ValidationError("dispatch_overhead must be >= 0")
        object.__setattr__(self, "k", int(self.k))

    @classmethod
    def from_machine(cls, m: MachineSpec, dispatch_overhead: float = 0.0) -> "ClusterConfig":
        return cls(k=m.k, e=m.e, dispatch_overhead=dispatch_overhead)


@dataclass(frozen=True)
class FaultModel:
    probability: float = 0.0
    retry_limit: int = 0
    retry_penalty: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.probability < 1:
            raise ValidationError("failure probability must lie in [0, 1)")
        if self.retry_limit < 0:
            raise ValidationError("retry_limit must be >= 0")
        if self.retry_penalty < 0:
            raise ValidationError("retry_penalty must be >= 0")


@dataclass
class SimReport:
    makespan: float
    phase_times: list[float]
    ideal_time: float
    retries: int = 0
    failed: bool = False
    failed_module: str | None = None
    module_times: dict[str, float] = field(default_factory=dict)
    timeline: list[tuple] | None = None

    @property
    def efficiency(self) -> float:
        if self.makespan <= 0:
            return 1.0
        # bulk time shifts and fsum'd work can disagree in the last ulp
        return min(1.0, self.ideal_time / self.makespan)

    def to_dict(self) -> dict:
        out = {
            "makespan": self.makespan,
            "ideal_time": self.ideal_time,
            "efficiency": self.efficiency,
            "retries": self.retries,
            "failed": self.failed,
            "phase_times": list(self.phase_times),
        }
        if self.failed_module is not None:
            out["failed_module"] = self.failed_module
        if self.module_times:
            out["module_times"] = dict(self.module_times)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def event_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time", "worker", "task", "kind", "event"])
        for time, worker, task, kind, event in self.timeline or ():
            w.writerow([repr(float(time)), worker, task, kind, event])
        return buf.getvalue()


# --- task construction ----------------------------------------------------------


def build_tasks(shape: WorkloadShape, p: CostParameters, c: ClusterConfig, *,
                jitter: float = 0.0, seed: int = 0) -> list[Phase]:
    """Phased task list of one FMO run.

    ``I_m`` monomer phases of ``N_f`` tasks each, then a single dimer phase
    holding the SCF-dimer tasks followed by the ES-dimer tasks. Durations are
    per-task work divided by the worker efficiency. A non-zero ``jitter``
    scales every duration by an independent uniform factor in
    ``[1 - jitter, 1 + jitter]``.
    """
    if not 0 <= jitter < 1:
        raise ValidationError("jitter must lie in [0, 1)")
    d_mon = monomer_task_work(shape.n_f, p) / c.e
    d_scf = dimer_task_work(shape.n_f, p) / c.e
    d_es = p.f_es0 / c.e
    rng = np.random.default_rng(seed) if jitter else None
    if jitter and shape.n_f * shape.i_m + shape.n_d + shape.n_es > EXACT_TASK_LIMIT:
        raise ValidationError("too many tasks for per-task duration jitter")

    def batch(kind, count, duration, first):
        if rng is None or count == 0:
            return TaskBatch(kind, count, duration, first)
        factors = rng.uniform(1 - jitter, 1 + jitter, size=count)
        return TaskBatch(kind, count, duration, first, tuple((duration * factors).tolist()))

    phases = []
    next_id = 0
    for it in range(shape.i_m):
        phases.append(Phase(it, (batch("monomer-iter", shape.n_f, d_mon, next_id),),
                            f"monomer-{it + 1}"))
        next_id += shape.n_f
    scf = batch("scf-dimer", shape.n_d, d_scf, next_id)
    es = batch("es-dimer", shape.n_es, d_es, next_id + shape.n_d)
    phases.append(Phase(shape.i_m, (scf, es), "dimer"))
    return phases


def expand_tasks(phases: Sequence[Phase]) -> list[Task]:
    return [t for ph in phases for b in ph.batches for t in b.tasks(ph.index)]


# --- engines --------------------------------------------------------------------


def _exact_phase(phase: Phase, k: int, start: float, overhead: float, policy: str,
                 log: list | None) -> float:
    tasks = [t for b in phase.batches for t in b.tasks(phase.index)]
    if policy == "lpt":
        tasks.sort(key=lambda t: (-t.duration, t.id))
    free = [(start, w) for w in range(k)]
    end = start
    for t in tasks:
        at, w = heapq.heappop(free)
        done = at + overhead + t.duration
        heapq.heappush(free, (done, w))
        end = max(end, done)
        if log is not None:
            log.append((at, phase.index, t.id, 0, w, t.kind, "start"))
            log.append((done, phase.index, t.id, 1, w, t.kind, "end"))
    return end


def _bulk_phase(phase: Phase, k: int, start: float, overhead: float, policy: str) -> float:
    batches = list(phase.batches)
    if policy == "lpt":
        batches.sort(key=lambda b: -b.duration)
    groups: dict[float, int] = {start: k}  # free time -> number of workers
    for b in batches:
        n = b.count
        d = b.duration + overhead
        if n == 0 or d == 0:
            continue
        while n > 0:
            times = sorted(groups)
            lo, hi = times[0], times[-1]
            if hi - lo < d:
                # every full round of k tasks shifts all groups by d
                rounds = n // k
                if rounds:
                    groups = {t + rounds * d: cnt for t, cnt in groups.items()}
                    n -= rounds * k
                    continue
                for t in times:
                    m = min(groups[t], n)
                    if m == 0:
                        break
                    _move(groups, t, t + d, m)
                    n -= m
                continue
            cnt = groups[lo]
            hops = max(1, math.floor((times[1] - lo) / d))
            full = n // cnt
            if full:
                hops = min(hops, full)
                _move(groups, lo, lo + hops * d, cnt)
                n -= hops * cnt
            else:
                _move(groups, lo, lo + d, n)
                n = 0
    return max(groups)


def _move(groups: dict[float, int], src: float, dst: float, m: int) -> None:
    groups[src] -= m
    if groups[src] == 0:
        del groups[src]
    groups[dst] = groups.get(dst, 0) + m


def simulate(phases: Sequence[Phase], c: ClusterConfig, *, policy: str = "fifo",
             timeline: bool = False, method: str = "auto") -> SimReport:
    """Greedy list scheduling of phased tasks on ``c.k`` workers.

    ``method`` picks the engine: ``"exact"``, ``"bulk"`` or ``"auto"`` (bulk
    unless an event log is requested or some batch has per-task durations).
    """
    if policy not in ("fifo", "lpt"):
        raise ValidationError(f"unknown policy {policy!r}")
    if method not in ("auto", "exact", "bulk"):
        raise ValidationError(f"unknown method {method!r}")
    homogeneous = all(b.homogeneous for ph in phases for b in ph.batches)
    if method == "auto":
        method = "bulk" if homogeneous and not timeline else "exact"
    if method == "bulk" and not homogeneous:
        raise ValidationError("bulk engine needs equal durations within each batch")
    if method == "exact" and sum(ph.n_tasks for ph in phases) > EXACT_TASK_LIMIT:
        raise ValidationError(f"more than {EXACT_TASK_LIMIT} tasks; use the bulk engine")

    log = [] if timeline else None
    now = 0.0
    phase_times = []
    for ph in phases:
        if method == "exact":
            end = _exact_phase(ph, c.k, now, c.dispatch_overhead, policy, log)
        else:
            end = _bulk_phase(ph, c.k, now, c.dispatch_overhead, policy)
        phase_times.append(end - now)
        now = end
    ideal = math.fsum(ph.work for ph in phases) / c.k
    events = None
    if log is not None:
        # total order: time, phase, task id, end-before-start
        log.sort(key=lambda ev: ev[:4])
        events = [(ev[0], ev[4], ev[2], ev[5], ev[6]) for ev in log]
    return SimReport(makespan=now, phase_times=phase_times, ideal_time=ideal, timeline=events)


# --- workflow mode --------------------------------------------------------------


@dataclass(frozen=True)
class Module:
    """One workflow step. ``body`` is a phased task population or a fixed time."""

    name: str
    body: tuple[Phase, ...] | float = 0.0
    startup: float = 0.0
    stage_in: float = 0.0
    stage_out: float = 0.0

    def __post_init__(self):
        if min(self.startup, self.stage_in, self.stage_out) < 0:
            raise ValidationError(f"module {self.name}: negative overhead")
        if isinstance(self.body, (int, float)):
            if self.body < 0:
                raise ValidationError(f"module {self.name}: negative body duration")
        else:
            object.__setattr__(self, "body", tuple(self.body))

    @property
    def overhead(self) -> float:
        return self.startup + self.stage_in + self.stage_out

    @property
    def n_tasks(self) -> int:
        if isinstance(self.body, tuple):
            return sum(ph.n_tasks for ph in self.body)
        return 1


@dataclass(frozen=True)
class WorkflowSpec:
    modules: tuple[Module, ...]
    edges: tuple[tuple[str, str], ...] = ()
    name: str = ""

    def __post_init__(self):
        modules = tuple(self.modules)
        names = [m.name for m in modules]
        if len(set(names)) != len(names):
            raise ValidationError("module names must be unique")
        known = set(names)
        edges = tuple((str(a), str(b)) for a, b in self.edges)
        for a, b in edges:
            if a not in known or b not in known:
                raise ValidationError(f"edge {a}->{b} names an unknown module")
        object.__setattr__(self, "modules", modules)
        object.__setattr__(self, "edges", edges)

    def order(self) -> list[str]:
        """Topological order, ties broken by declaration order."""
        preds = defaultdict(set)
        for a, b in self.edges:
            preds[b].add(a)
        ts = TopologicalSorter()
        for m in self.modules:
            ts.add(m.name, *sorted(preds[m.name]))
        rank = {m.name: i for i, m in enumerate(self.modules)}
        try:
            ts.prepare()
        except CycleError as exc:
            raise WorkflowCycleError(f"workflow has a cycle: {exc.args[1]}") from exc
        out = []
        while ts.is_active():
            ready = sorted(ts.get_ready(), key=rank.__getitem__)
            out.extend(ready)
            ts.done(*ready)
        return out

    def predecessors(self, name: str) -> list[str]:
        return [a for a, b in self.edges if b == name]

    def module(self, name: str) -> Module:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)


def _body_run(m: Module, c: ClusterConfig, policy: str) -> tuple[float, float]:
    """(elapsed, ideal) of one execution of a module body."""
    if isinstance(m.body, tuple):
        rep = simulate(m.body, c, policy=policy)
        return rep.makespan, rep.ideal_time
    return float(m.body), float(m.body)


def simulate_workflow(w: WorkflowSpec, c: ClusterConfig, f: FaultModel | None = None, *,
                      policy: str = "fifo", timeline: bool = False) -> SimReport:
    """Run a module DAG; each module gets the whole cluster while it runs.

    A module starts when all its predecessors have staged out. If any of its
    tasks fails (binomial draw from the seeded generator) the attempt is
    discarded once finished and the module reruns from its inputs after
    ``retry_penalty``; more than ``retry_limit`` retries of one module end the
    simulated run with ``failed=True``.
    """
    f = f or FaultModel()
    rng = np.random.default_rng(f.seed)
    finish: dict[str, float] = {}
    module_times: dict[str, float] = {}
    log = [] if timeline else None
    retries = 0
    ideal = 0.0
    for name in w.order():
        m = w.module(name)
        start = max((finish[p] for p in w.predecessors(name)), default=0.0)
        body, body_ideal = _body_run(m, c, policy)
        attempt_time = m.overhead + body
        t = start
        local_retries = 0
        if log is not None:
            log.append((start, -1, name, "module", "start"))
        while True:
            failures = int(rng.binomial(m.n_tasks, f.probability)) if f.probability else 0
            t += attempt_time
            if failures == 0:
                break
            retries += 1
            local_retries += 1
            if log is not None:
                log.append((t, -1, name, "module", "retry"))
            if local_retries > f.retry_limit:
                module_times[name] = t - start
                return SimReport(makespan=t, phase_times=list(module_times.values()),
                                 ideal_time=ideal, retries=retries, failed=True,
                                 failed_module=name, module_times=module_times,
                                 timeline=log)
            t += f.retry_penalty
        ideal += body_ideal
        finish[name] = t
        module_times[name] = t - start
        if log is not None:
            log.append((t, -1, name, "module", "end"))
    makespan = max(finish.values(), default=0.0)
    if log is not None:
        log.sort(key=lambda ev: (ev[0], ev[2]))
    return SimReport(makespan=makespan, phase_times=list(module_times.values()),
                     ideal_time=ideal, retries=retries, module_times=module_times,
                     timeline=log)


def flatten_workflow(w: WorkflowSpec) -> list[Phase]:
    """Concatenate task-population bodies in topological order."""
    phases = []
    for name in w.order():
        body = w.module(name).body
        if isinstance(body, tuple):
            phases.extend(body)
    return phases


# --- sweeps ---------------------------------------------------------------------


def efficiency_sweep(n_f_values: Iterable[int], i_m: int, p: CostParameters,
                     machines: dict[str, MachineSpec], *,
                     dispatch_overhead: float = 0.0) -> list[dict]:
    """Analytic and simulated elapsed time for each (machine, N_f)."""
    rows = []
    for name, m in machines.items():
        c = ClusterConfig.from_machine(m, dispatch_overhead)
        for n_f in n_f_values:
            shape = shape_from_nf(int(n_f), i_m, p)
            wb = work_total(shape, p)
            sim = simulate(build_tasks(shape, p, c), c)
            rows.append({
                "machine": name,
                "nf": shape.n_f,
                "f_m": wb.f_m,
                "f_d": wb.f_d,
                "f_es": wb.f_es,
                "f_total": wb.f_total,
                "t_predict": predict_elapsed(shape, p, m),
                "t_simulated": sim.makespan,
                "efficiency": sim.efficiency,
            })
    return rows


# --- JSON -----------------------------------------------------------------------


def _phases_from_json(items: list, next_id: int) -> tuple[list[Phase], int]:
    phases = []
    for item in items:
        for _ in range(int(item.get("repeat", 1))):
            batches = []
            for b in item["batches"]:
                durations = b.get("durations")
                count = int(b["count"]) if durations is None else len(durations)
                batches.append(TaskBatch(
                    b["kind"], count, float(b.get("duration", 0.0)), next_id,
                    None if durations is None else tuple(float(x) for x in durations),
                ))
                next_id += count
            phases.append(Phase(len(phases), tuple(batches), item.get("label", "")))
    return phases, next_id


def workflow_from_dict(data: dict) -> tuple[WorkflowSpec, ClusterConfig | None]:
    """Parse a workflow document; returns the spec and its cluster, if given."""
    try:
        modules = []
        next_id = 0
        for md in data["modules"]:
            body = md.get("body", {"duration": 0.0})
            if "phases" in body:
                phases, next_id = _phases_from_json(body["phases"], next_id)
                body_value: tuple | float = tuple(phases)
            else:
                body_value = float(body.get("duration", 0.0))
            modules.append(Module(
                name=str(md["name"]),
                body=body_value,
                startup=float(md.get("startup", 0.0)),
                stage_in=float(md.get("stage_in", 0.0)),
                stage_out=float(md.get("stage_out", 0.0)),
            ))
        edges = tuple(tuple(e) for e in data.get("edges", ()))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"bad workflow document: {exc!r}") from exc
    spec = WorkflowSpec(tuple(modules), edges, str(data.get("name", "")))
    cluster = None
    if "cluster" in data:
        cd = data["cluster"]
        cluster = ClusterConfig(int(cd["k"]), float(cd.get("e", 1.0)),
                                float(cd.get("dispatch_overhead", 0.0)))
    return spec, cluster


def workflow_to_dict(w: WorkflowSpec, c: ClusterConfig | None = None) -> dict:
    modules = []
    for m in w.modules:
        if isinstance(m.body, tuple):
            body = {"phases": [
                {"label": ph.label, "batches": [
                    {"kind": b.kind, "count": b.count, "duration": b.duration}
                    if b.homogeneous else {"kind": b.kind, "durations": list(b.durations)}
                    for b in ph.batches
                ]} for ph in m.body
            ]}
        else:
            body = {"duration": m.body}
        modules.append({"name": m.name, "startup": m.startup, "stage_in": m.stage_in,
                        "stage_out": m.stage_out, "body": body})
    out = {"name": w.name, "modules": modules, "edges": [list(e) for e in w.edges]}
    if c is not None:
        out["cluster"] = {"k": c.k, "e": c.e, "dispatch_overhead": c.dispatch_overhead}
    return out
