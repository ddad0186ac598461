"""Command-line front end: ``fmo-petasim {calibrate,predict,simulate,run-toy,sweep}``.

Exit codes: 0 success, 2 unreadable input file, 3 calibration not
identifiable, 4 bad arguments or unknown preset, 5 workflow has a cycle,
6 engine did not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import calibrate as cal
from . import costmodel as cm
from . import engine
from . import presets
from .errors import (
    ConvergenceError,
    FmoPetasimError,
    IdentifiabilityError,
    ParseError,
    PresetNotFoundError,
    ValidationError,
    WorkflowCycleError,
)
from .fragments import WorkloadShape, classify_pairs
from .schedsim import (
    ClusterConfig,
    FaultModel,
    build_tasks,
    efficiency_sweep,
    simulate,
    simulate_workflow,
)

EXIT_OK, EXIT_PARSE, EXIT_IDENT, EXIT_ARGS, EXIT_DAG, EXIT_NOCONV = 0, 2, 3, 4, 5, 6
SWEEP_COLUMNS = ("nf", "f_m", "f_d", "f_es", "f_total", "t_predict", "t_simulated")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


class _Exit(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code


def _write_output(args, payload: dict | None = None, rows: list[dict] | None = None,
                  columns=None) -> None:
    """Write the machine-readable result to ``--output`` in ``--format``."""
    if not args.output:
        return
    if args.format == "csv":
        if rows is None:
            rows = [_flatten(payload)]
        if columns is None:
            columns = list(rows[0].keys()) if rows else []
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt_csv(v) for k, v in row.items()})
        text = buf.getvalue()
    else:
        data = payload if payload is not None else {"rows": rows}
        text = json.dumps(data, indent=2, sort_keys=True, default=float) + "\n"
    Path(args.output).write_text(text)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        elif not isinstance(v, list):
            out[key] = v
    return out


def _fmt_csv(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# --- subcommands ------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    records = presets.load_dataset(args.records)
    result = cal.fit(records, args.reference)
    report = cal.residual_report(result, records)
    p = result.params
    ref = presets.load_params(args.compare) if args.compare else None
    print(f"records: {len(records)}  reference: {args.reference}  rounds: {result.rounds}")
    for name, value in zip(("f_m0", "f_m1", "f_d0", "f_d1", "f_es0"), p.as_vector()):
        line = f"{name:8s} {value:.6g}"
        if ref is not None:
            line += f"   ({getattr(ref, name):g} in {args.compare}: {value / getattr(ref, name) - 1:+.1%})"
        print(line)
    print(f"nd_slope {p.nd_slope:.4f}")
    for machine, e in sorted(result.efficiencies.items()):
        print(f"E[{machine}] {e:.6g}")
    worst = max(abs(row[ph]) for row in result.residuals for ph in cal.PHASES)
    print(f"objective {result.objective:.6g}  max |relative residual| {worst:.3g}")
    if worst < 1e-8:
        print("exact recovery: every phase residual below 1e-8")
    payload = result.to_dict()
    payload["report"] = report
    _write_output(args, payload, rows=report if args.format == "csv" else None)
    return EXIT_OK


def _predict_payload(n_f: int, i_m: int, p: cm.CostParameters, m: cm.MachineSpec,
                     n_d: int | None = None, n_es: int | None = None) -> dict:
    shape = cm.shape_from_nf(n_f, i_m, p)
    if n_d is not None or n_es is not None:
        n_d = shape.n_d if n_d is None else n_d
        n_es = shape.n_pairs - n_d if n_es is None else n_es
        shape = WorkloadShape(n_f, i_m, n_d, n_es)
    wb = cm.work_total(shape, p)
    out = {
        "machine": m.name,
        "k": m.k,
        "e": m.e,
        "shape": {"n_f": shape.n_f, "i_m": shape.i_m, "n_d": shape.n_d, "n_es": shape.n_es},
        "work": wb.to_dict(),
        "t_predict": cm.predict_elapsed(shape, p, m),
        "pair_array_bytes": cm.pair_array_bytes(n_f),
    }
    out["effective_flops"] = cm.effective_flops(m) if m.ref_node_flops is not None else None
    return out


def cmd_predict(args) -> int:
    if args.nf < 1 or args.im < 0:
        raise _Exit(EXIT_ARGS, "--nf must be >= 1 and --im >= 0")
    p = presets.load_params(args.params)
    m = presets.load_machine(args.machine)
    out = _predict_payload(args.nf, args.im, p, m, args.nd, args.nes)
    s, w = out["shape"], out["work"]
    print(f"machine   {m.name}: K={m.k} E={m.e:g}")
    print(f"shape     N_f={s['n_f']} I_m={s['i_m']} N_d={s['n_d']} N_es={s['n_es']}")
    print(f"work      F_m={w['f_m']:.6g} F_d={w['f_d']:.6g} F_es={w['f_es']:.6g} "
          f"F_total={w['f_total']:.6g} ref-node-s")
    t = out["t_predict"]
    print(f"elapsed   {t:.6g} s ({t / 3600:.3g} h)")
    if out["effective_flops"] is not None:
        print(f"flops     {out['effective_flops']:.6g} ({out['effective_flops'] / 1e15:g} PF)")
    print(f"pairs     {out['pair_array_bytes']} bytes ({out['pair_array_bytes'] / 1e9:g} GB)")
    _write_output(args, out)
    return EXIT_OK


def _fault(args) -> FaultModel:
    return FaultModel(args.failure_prob, args.retry_limit, args.retry_penalty, args.seed)


def cmd_simulate(args) -> int:
    if args.workflow:
        spec, cluster, baseline = presets.load_workflow(args.workflow)
        if args.machine:
            cluster = ClusterConfig.from_machine(presets.load_machine(args.machine),
                                                 args.dispatch_overhead)
        if cluster is None:
            raise _Exit(EXIT_ARGS, "workflow has no cluster; pass --machine")
        rep = simulate_workflow(spec, cluster, _fault(args), policy=args.policy,
                                timeline=bool(args.event_log))
        payload = rep.to_dict()
        payload["workflow"] = spec.name
        print(f"workflow  {spec.name} on K={cluster.k}")
        for name, t in rep.module_times.items():
            print(f"  {name:10s} {t:.6g} s")
        print(f"makespan  {rep.makespan:.6g} s  retries {rep.retries}"
              + ("  FAILED in " + rep.failed_module if rep.failed else ""))
        if baseline:
            base_spec, base_cluster, _ = presets.load_workflow(baseline)
            base = simulate_workflow(base_spec, base_cluster or cluster)
            ratio = rep.makespan / base.makespan
            payload["baseline"] = {"name": base_spec.name, "makespan": base.makespan}
            payload["overhead_ratio"] = ratio
            print(f"baseline  {base_spec.name} {base.makespan:.6g} s  overhead ratio {ratio:.4f}")
    else:
        if args.nf is None:
            raise _Exit(EXIT_ARGS, "give --workflow or --nf")
        p = presets.load_params(args.params)
        m = presets.load_machine(args.machine or "peta-2007")
        c = ClusterConfig.from_machine(m, args.dispatch_overhead)
        shape = cm.shape_from_nf(args.nf, args.im, p)
        phases = build_tasks(shape, p, c, jitter=args.jitter, seed=args.seed)
        rep = simulate(phases, c, policy=args.policy, timeline=bool(args.event_log))
        payload = rep.to_dict()
        payload["t_predict"] = cm.predict_elapsed(shape, p, m)
        print(f"machine   {m.name}: K={m.k} E={m.e:g}  N_f={shape.n_f} I_m={shape.i_m}")
        print(f"makespan  {rep.makespan:.6g} s  ideal {rep.ideal_time:.6g} s  "
              f"analytic {payload['t_predict']:.6g} s")
    print(f"efficiency {rep.efficiency:.4f}")
    if args.event_log:
        Path(args.event_log).write_text(rep.event_log_csv())
    _write_output(args, payload)
    return EXIT_OK


def cmd_run_toy(args) -> int:
    system = presets.load_system_preset(args.system)
    config = engine.EngineConfig(tol=args.tol, max_iterations=args.max_iterations,
                                 damping=args.damping, sigma=args.sigma,
                                 coulomb_constant=args.coulomb_constant)
    cls = classify_pairs(system, args.threshold)
    result = engine.fmo2_total_energy(system, cls, config)
    oracle = engine.full_system_oracle(system, config) if args.oracle else None
    report = engine.run_report(result, cls, oracle)
    report["system"] = system.label
    print(f"system    {system.label}: N_f={system.n_fragments} sites={system.n_sites}")
    print(f"pairs     threshold {cls.threshold:g} A: N_d={cls.n_d} N_es={cls.n_es}")
    print(f"scc       iterations {result.monomer.iterations_used} "
          f"converged {result.converged} last change {result.monomer.last_change:.3g}")
    if not result.converged:
        _write_output(args, report)
        raise _Exit(EXIT_NOCONV,
                    f"monomer loop did not converge in {config.max_iterations} iterations "
                    f"(last max charge change {result.monomer.last_change:.3g} > tol {config.tol:g})")
    print(f"energy    {result.total_energy:.12g}")
    if oracle is not None:
        print(f"oracle    {oracle:.12g}  relative error {report['relative_error']:.3g}")
    _write_output(args, report)
    return EXIT_OK


def sweep_grid(nf_min: int, nf_max: int, steps: int, scale: str) -> list[int]:
    """N_f grid snapped to even values, duplicates removed.

    With the 7.5 dimers-per-fragment law, even N_f gives whole dimer counts, so
    the predicted time is exactly quadratic along the grid.
    """
    if nf_min < 1 or nf_max < nf_min or steps < 1:
        raise _Exit(EXIT_ARGS, "empty N_f range")
    if steps == 1 or nf_min == nf_max:
        raw = [nf_min]
    elif scale == "log":
        raw = np.geomspace(nf_min, nf_max, steps)
    else:
        raw = np.linspace(nf_min, nf_max, steps)
    grid = []
    for x in raw:
        n = max(2, int(2 * round(float(x) / 2)))
        if not grid or n != grid[-1]:
            grid.append(n)
    return grid


def quadratic_residual(nf, t) -> float:
    """Relative 2-norm residual of a least-squares quadratic fit."""
    nf = np.asarray(nf, dtype=float)
    t = np.asarray(t, dtype=float)
    x = nf / nf.max()
    a = np.vstack([np.ones_like(x), x, x * x]).T
    coef, *_ = np.linalg.lstsq(a, t, rcond=None)
    return float(np.linalg.norm(a @ coef - t) / np.linalg.norm(t))


def cmd_sweep(args) -> int:
    grid = sweep_grid(args.nf_min, args.nf_max, args.steps, args.scale)
    p = presets.load_params(args.params)
    m = presets.load_machine(args.machine)
    rows = efficiency_sweep(grid, args.im, p, {m.name: m},
                            dispatch_overhead=args.dispatch_overhead)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([row["nf"]] + [repr(float(row[c])) for c in SWEEP_COLUMNS[1:]])
    if args.output:
        if args.format == "json":
            _write_output(args, {"machine": m.name, "rows": rows})
        else:
            Path(args.output).write_text(buf.getvalue())
        print(f"{len(rows)} rows written to {args.output}")
        if len(rows) >= 3:
            res = quadratic_residual([r["nf"] for r in rows], [r["t_predict"] for r in rows])
            print(f"quadratic fit of t_predict: relative residual {res:.3g}")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", help="write machine-readable result here")
    # default resolved per subcommand: the action object is shared by all of them
    common.add_argument("--format", choices=("json", "csv"),
                        help="output file format (default: csv for sweep, json otherwise)")
    common.add_argument("--seed", type=int, default=0)

    parser = _Parser(prog="fmo-petasim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("calibrate", parents=[common], help="fit cost parameters to timings")
    sp.add_argument("records", nargs="?", default="paper-tables",
                    help="timing CSV path or dataset preset (default: paper-tables)")
    sp.add_argument("--reference", default="ibm", help="machine whose efficiency is fixed to 1")
    sp.add_argument("--compare", default="paper-tableIV",
                    help="params preset to compare against ('' to skip)")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("predict", parents=[common], help="predict elapsed time for N_f")
    sp.add_argument("--nf", type=int, required=True)
    sp.add_argument("--im", type=int, default=17)
    sp.add_argument("--params", default="paper-tableIV")
    sp.add_argument("--machine", default="peta-2007")
    sp.add_argument("--nd", type=int, help="measured SCF-dimer count instead of the linear law")
    sp.add_argument("--nes", type=int, help="measured ES-dimer count (default: remaining pairs)")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("simulate", parents=[common], help="simulate scheduling or a workflow")
    sp.add_argument("--workflow", help="workflow JSON path or preset")
    sp.add_argument("--nf", type=int)
    sp.add_argument("--im", type=int, default=17)
    sp.add_argument("--params", default="paper-tableIV")
    sp.add_argument("--machine")
    sp.add_argument("--dispatch-overhead", type=float, default=0.0)
    sp.add_argument("--policy", choices=("fifo", "lpt"), default="fifo")
    sp.add_argument("--jitter", type=float, default=0.0)
    sp.add_argument("--failure-prob", type=float, default=0.0)
    sp.add_argument("--retry-limit", type=int, default=0)
    sp.add_argument("--retry-penalty", type=float, default=0.0)
    sp.add_argument("--event-log", help="write the event log CSV here")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run-toy", parents=[common], help="run the surrogate FMO2 engine")
    sp.add_argument("system", help="fragment-system JSON path or preset")
    sp.add_argument("--threshold", type=float, default=5.0, help="SCF-dimer distance cutoff (A)")
    sp.add_argument("--oracle", action="store_true", help="compare with the exact solution")
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--max-iterations", type=int, default=200)
    sp.add_argument("--damping", type=float, default=0.7)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--coulomb-constant", type=float, default=1.0)
    sp.set_defaults(func=cmd_run_toy)

    sp = sub.add_parser("sweep", parents=[common], help="elapsed time over an N_f grid")
    sp.add_argument("--nf-min", type=int, required=True)
    sp.add_argument("--nf-max", type=int, required=True)
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--scale", choices=("log", "linear"), default="log")
    sp.add_argument("--im", type=int, default=17)
    sp.add_argument("--params", default="paper-tableIV")
    sp.add_argument("--machine", default="peta-2007")
    sp.add_argument("--dispatch-overhead", type=float, default=0.0)
    sp.set_defaults(func=cmd_sweep, default_format="csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.format is None:
        args.format = getattr(args, "default_format", "json")
    try:
        return args.func(args)
    except _Exit as exc:
        if str(exc):
            print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except IdentifiabilityError as exc:
        print(f"identifiability error: {exc}", file=sys.stderr)
        return EXIT_IDENT
    except WorkflowCycleError as exc:
        print(f"invalid workflow: {exc}", file=sys.stderr)
        return EXIT_DAG
    except ConvergenceError as exc:
        print(f"not converged: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NOCONV
    except (PresetNotFoundError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except FmoPetasimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
