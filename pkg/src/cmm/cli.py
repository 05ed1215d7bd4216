"""Command-line entry point tying the pipeline stages together.

Subcommands: profile, fit, configure, schedule, simulate, run, bench.
Every subcommand accepts --json for machine-readable output; CMM_SEED
overrides generator seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import bench, executor, gantt, profiling, scheduler, simulator, tiling
from .cluster import auto_configure, dump_cluster, load_cluster
from .errors import CmmError
from .expr import parse_program
from .timemodel import (TimeModel, fit, read_profile_log, write_profile_log)


def _read(path: str) -> str:
    return Path(path).read_text()


def _seed(args) -> int:
    env = os.environ.get("CMM_SEED")
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(env) if env else 0


def _config_hash(args, *texts: str) -> str:
    h = hashlib.sha256()
    h.update(repr(sorted(vars(args).items())).encode())
    for text in texts:
        h.update(text.encode())
    return h.hexdigest()[:16]


def _emit(args, doc: dict, human: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(doc, indent=2, sort_keys=True, default=str))
    else:
        print(human)


def _parse_tiles(spec: str, n: int) -> list[int]:
    """Tile list: absolute sizes, 'Nk' suffixes, or percentages."""
    out = []
    for item in spec.split(","):
        item = item.strip().lower()
        if not item:
            continue
        if item.endswith("%"):
            out.append(max(1, tiling.cld(int(item[:-1]) * n, 100)))
        elif item.endswith("k"):
            out.append(int(float(item[:-1]) * 1000))
        else:
            out.append(int(item))
    return sorted(set(out))


def _program_size(text: str) -> int:
    prog = parse_program(text)
    return max(max(r.rows, r.cols) for r in prog.input_specs())


# --- subcommand handlers -----------------------------------------------------

def cmd_profile(args) -> int:
    cluster = load_cluster(_read(args.cluster))
    dims = [int(d) for d in args.dims.split(",")]
    mm = ([int(d) for d in args.matmul_dims.split(",")]
          if args.matmul_dims else dims)
    samples = profiling.profile_cluster(cluster, dims=dims, matmul_dims=mm,
                                        reps=args.reps, seed=_seed(args))
    write_profile_log(args.out, samples)
    _emit(args, {"samples": len(samples), "out": args.out},
          f"wrote {len(samples)} profile samples to {args.out}")
    return 0


def cmd_fit(args) -> int:
    samples = read_profile_log(args.profile)
    model = fit(samples)
    Path(args.out).write_text(model.to_json())
    doc = {"out": args.out,
           "compute_entries": len(model.compute),
           "links": len(model.comm),
           "residual_rms": model.fitted_residual}
    _emit(args, doc, f"fitted {len(model.compute)} compute entries and "
                     f"{len(model.comm)} links -> {args.out}")
    return 0


def cmd_configure(args) -> int:
    cluster = load_cluster(_read(args.cluster))
    model = TimeModel.from_json(_read(args.model))
    configured = auto_configure(cluster, model)
    if args.out:
        Path(args.out).write_text(dump_cluster(configured))
    rows = [{"id": n.id, "cores": n.cores, "workers": n.worker_procs,
             "threads": n.worker_threads_each, "comms": n.comm_procs,
             "master": n.is_master, "class": n.compute_class}
            for n in configured.nodes]
    table = "\n".join(
        f"{r['id']:>8}  cores={r['cores']:<3} workers={r['workers']:<2} "
        f"x{r['threads']} threads  comms={r['comms']:<3}"
        f"{'  [master]' if r['master'] else ''}" for r in rows)
    _emit(args, {"nodes": rows}, table)
    return 0


def _load_mcp(args):
    program = _read(args.program)
    cluster = load_cluster(_read(args.cluster))
    model = TimeModel.from_json(_read(args.model))
    return program, cluster, model


def cmd_schedule(args) -> int:
    program, cluster, model = _load_mcp(args)
    n = _program_size(program)
    tiles = _parse_tiles(args.tiles, n) if args.tiles else \
        bench.default_ladder(n)
    dag = bench.program_to_taskdag(program)
    tdags = [tiling.tile_task_dag(dag, (t, t)) for t in tiles]
    opts = scheduler.ScheduleOpts(dynamic_tiling=not args.no_dynamic_tiling,
                                  cache=not args.no_cache)
    sched, sim, rows = scheduler.candidate_sweep(
        tdags, cluster, model, opts=opts, parallelism=args.parallelism)
    out = args.out or "schedule.json"
    Path(out).write_text(sched.to_json())
    if args.emit_gantt:
        Path(args.emit_gantt).write_text(gantt.schedule_svg(sched))
    doc = {"out": out, "tile": list(sched.tile_size),
           "makespan": sim.makespan, "startup": sim.startup_duration,
           "candidates": [{"tile": list(r["tile"]),
                           "makespan": r["makespan"]} for r in rows],
           "config_hash": _config_hash(args, program)}
    _emit(args, doc, f"selected tile {sched.tile_size[0]} with predicted "
                     f"makespan {sim.makespan:.4f}s -> {out}")
    return 0


def cmd_simulate(args) -> int:
    cluster = load_cluster(_read(args.cluster))
    model = TimeModel.from_json(_read(args.model))
    sched = scheduler.Schedule.from_json(_read(args.schedule))
    mode = "zero_comm" if args.zero_comm else "normal"
    result = simulator.simulate(sched, model, cluster, mode)
    util = {n.id: round(result.busy_fraction(n.id, n.worker_procs), 4)
            for n in cluster.nodes}
    doc = {"makespan": result.makespan,
           "startup_duration": result.startup_duration,
           "mode": mode, "per_node_busy": result.per_node_busy,
           "utilization": util}
    _emit(args, doc,
          f"makespan {result.makespan:.4f}s  startup "
          f"{result.startup_duration:.4f}s  mode={mode}\n" +
          "\n".join(f"  {nid}: busy {result.per_node_busy.get(nid, 0.0):.4f}s"
                    f" (util {util[nid]:.1%})" for nid in sorted(util)))
    return 0


def cmd_run(args) -> int:
    program, cluster, model = _load_mcp(args)
    n = _program_size(program)
    if args.tile:
        tiles = _parse_tiles(args.tile, n)
    else:
        tiles = bench.default_ladder(n)
    dag = bench.program_to_taskdag(program)
    tdags = [tiling.tile_task_dag(dag, (t, t)) for t in tiles]
    opts = scheduler.ScheduleOpts(dynamic_tiling=not args.no_dynamic_tiling,
                                  cache=not args.no_cache)
    t0 = time.perf_counter()
    sched, sim = simulator.predict_and_select(
        tdags, cluster, model, opts, parallelism=args.parallelism)
    if args.zero_comm:
        zc = simulator.simulate(sched, model, cluster, "zero_comm")
        doc = {"tile": list(sched.tile_size), "makespan": sim.makespan,
               "zero_comm_makespan": zc.makespan,
               "config_hash": _config_hash(args, program)}
        _emit(args, doc, f"simulation only: makespan {sim.makespan:.4f}s, "
                         f"zero-comm bound {zc.makespan:.4f}s")
        return 0

    inputs = executor.materialize_inputs(dag.inputs.values())
    report = executor.execute(sched, inputs, cluster)
    reference = executor.reference_eval(program, inputs)
    report.max_abs_error = executor.max_rel_error(report.output, reference)
    report.simulated_makespan = sim.makespan

    outdir = Path(args.out_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = _config_hash(args, program)
    (outdir / "schedule.json").write_text(sched.to_json())
    events = [{"time": e.time, "kind": e.kind, "subject": e.subject}
              for e in sim.event_log]
    with open(outdir / "events.jsonl", "w") as fh:
        fh.write(json.dumps({"format": "cmm-events/1",
                             "config_hash": cfg}) + "\n")
        for ev in events:
            fh.write(json.dumps(ev) + "\n")
    (outdir / "gantt.svg").write_text(gantt.schedule_svg(sched))
    if args.emit_gantt:
        Path(args.emit_gantt).write_text(
            gantt.measured_svg(sched, report.task_times))
    doc = report.to_json_dict()
    doc.update({"tile": list(sched.tile_size), "config_hash": cfg,
                "wall_time": time.perf_counter() - t0,
                "artifacts": str(outdir)})
    (outdir / "report.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True))
    ok = report.max_abs_error <= args.tolerance
    _emit(args, doc,
          f"tile {sched.tile_size[0]}: measured {report.measured_makespan:.4f}s"
          f" vs simulated {sim.makespan:.4f}s; max rel error "
          f"{report.max_abs_error:.2e} ({'OK' if ok else 'MISMATCH'})")
    return 0 if ok else 1


def cmd_bench(args) -> int:
    cluster = load_cluster(_read(args.cluster))
    model = TimeModel.from_json(_read(args.model))
    sizes = [int(s) for s in args.sizes.split(",")]
    nodes = [int(s) for s in args.nodes.split(",")]
    rows = []
    for size in sizes:
        spec = bench.BenchmarkSpec(args.name, size, args.iterations,
                                   _seed(args))
        axes = {"nodes": nodes,
                "tile_sizes": (_parse_tiles(args.tiles, size)
                               if args.tiles else
                               bench.default_ladder(size)),
                "cache": [not args.no_cache],
                "dynamic_tiling": [not args.no_dynamic_tiling]}
        rows.extend(bench.sweep(spec, cluster, model, axes,
                                execute=args.execute))
    if args.out:
        Path(args.out).write_text(bench.rows_to_csv(rows))
    _emit(args, {"rows": rows},
          bench.rows_to_csv(rows) if not args.out else
          f"wrote {len(rows)} rows to {args.out}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cmm",
        description="matrix-program capture, tiling, scheduling, simulation "
                    "and emulated execution")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--json", action="store_true",
                        help="machine-readable output")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("profile", help="measure kernels and links")
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", default="64,128,256,512")
    sp.add_argument("--matmul-dims", default="64,128,256")
    sp.add_argument("--reps", type=int, default=profiling.DEFAULT_REPS)
    common(sp)
    sp.set_defaults(func=cmd_profile)

    sp = sub.add_parser("fit", help="fit the time model from a profile log")
    sp.add_argument("--profile", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("configure", help="auto-configure communicators")
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_configure)

    sp = sub.add_parser("schedule", help="pick the best candidate schedule")
    sp.add_argument("--program", required=True, dest="program")
    sp.add_argument("--dag", dest="program",
                    help="alias for --program")
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--tiles", default=None)
    sp.add_argument("--out")
    sp.add_argument("--emit-gantt")
    sp.add_argument("--no-cache", action="store_true")
    sp.add_argument("--no-dynamic-tiling", action="store_true")
    sp.add_argument("--parallelism", type=int, default=4)
    common(sp)
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("simulate", help="replay a schedule file")
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--zero-comm", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="full pipeline incl. emulated execution")
    sp.add_argument("--program", required=True)
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--tile", default=None,
                    help="fixed tile size(s); default: auto ladder")
    sp.add_argument("--auto", action="store_true",
                    help="pick tile size by simulation (default)")
    sp.add_argument("--no-cache", action="store_true")
    sp.add_argument("--no-dynamic-tiling", action="store_true")
    sp.add_argument("--zero-comm", action="store_true",
                    help="simulation only, no execution")
    sp.add_argument("--out-dir", default="cmm-out")
    sp.add_argument("--emit-gantt")
    sp.add_argument("--tolerance", type=float, default=1e-9)
    sp.add_argument("--parallelism", type=int, default=4)
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("bench", help="benchmark sweep to CSV")
    sp.add_argument("--name", required=True, choices=bench.BENCH_NAMES)
    sp.add_argument("--sizes", default="256")
    sp.add_argument("--nodes", default="1,2,4")
    sp.add_argument("--tiles", default=None)
    sp.add_argument("--iterations", type=int, default=4)
    sp.add_argument("--cluster", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--execute", action="store_true")
    sp.add_argument("--no-cache", action="store_true")
    sp.add_argument("--no-dynamic-tiling", action="store_true")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CmmError as exc:
        stage = args.command
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
