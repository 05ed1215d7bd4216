"""Benchmark program generators and the configuration sweep harness."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, replace as dc_replace
from typing import Iterable, Optional

from . import executor, scheduler, simulator, tiling
from .cluster import ClusterSpec, replace_cluster
from .errors import ProgramError
from .expr import Session, parse_program, replay_program
from .rewrite import TaskDag
from .timemodel import TimeModel

BENCH_NAMES = ("markov", "kmeans-lite", "mm-chain", "montage-like",
               "synth-dag")


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    matrix_size: int
    iterations: int = 4
    seed: int = 0
    width: int = 3
    depth: int = 3

    def __post_init__(self):
        if self.matrix_size < 2:
            raise ProgramError("matrix_size must be >= 2")
        if self.iterations < 1:
            raise ProgramError("iterations must be >= 1")


def default_ladder(n: int) -> list[int]:
    """10/30/50 percent tile sizes, the standard candidate band."""
    return sorted({tiling.cld(n, 10), tiling.cld(3 * n, 10),
                   tiling.cld(5 * n, 10)})


def generate(spec: BenchmarkSpec) -> str:
    """Deterministic program text for one benchmark shape."""
    n, k, s = spec.matrix_size, spec.iterations, spec.seed
    lines = [f"# {spec.name} n={n} k={k} seed={s}"]
    if spec.name == "markov":
        lines += [f"P = input {n} {n} {s} stochastic",
                  f"u = input 1 {n} {s + 1}"]
        prev = "P"
        for i in range(1, k):
            lines.append(f"m{i} = mul {prev} P")
            prev = f"m{i}"
        lines += [f"r = mul u {prev}", "force r"]
    elif spec.name == "kmeans-lite":
        lines += [f"X = input {n} {n} {s}", f"C = input {n} {n} {s + 1}",
                  "ct = transpose C"]
        prev = "X"
        for i in range(1, k + 1):
            lines.append(f"d{i} = mul {prev} ct")
            lines.append(f"a{i} = emul d{i} d{i}")
            prev = f"a{i}"
        lines.append(f"force {prev}")
    elif spec.name == "mm-chain":
        lines.append(f"a0 = input {n} {n} {s}")
        for i in range(1, k + 1):
            lines.append(f"a{i} = input {n} {n} {s + i}")
        prev = "a0"
        for i in range(1, k + 1):
            lines.append(f"c{i} = mul {prev} a{i}")
            prev = f"c{i}"
        lines.append(f"force {prev}")
    elif spec.name == "montage-like":
        parts = []
        for c in range(3):
            lines += [f"i{c} = input {n} {n} {s + 2 * c}",
                      f"w{c} = input {n} {n} {s + 2 * c + 1}",
                      f"p{c} = mul i{c} w{c}",
                      f"q{c} = smul p{c} {0.3 + 0.2 * c:.2f}",
                      f"ch{c} = add q{c} i{c}"]
            parts.append(f"ch{c}")
        lines += [f"z1 = add {parts[0]} {parts[1]}",
                  f"z2 = add z1 {parts[2]}", "force z2"]
    elif spec.name == "synth-dag":
        rng = random.Random(s)
        prev_layer = []
        for j in range(spec.width):
            lines.append(f"x{j} = input {n} {n} {s + j}")
            prev_layer.append(f"x{j}")
        ops = ("add", "sub", "emul", "mul")
        for layer in range(1, spec.depth + 1):
            cur = []
            for j in range(spec.width):
                a = rng.choice(prev_layer)
                b = rng.choice(prev_layer)
                op = rng.choice(ops)
                name = f"y{layer}_{j}"
                lines.append(f"{name} = {op} {a} {b}")
                cur.append(name)
            prev_layer = cur
        acc = prev_layer[0]
        for j, node in enumerate(prev_layer[1:], 1):
            lines.append(f"f{j} = add {acc} {node}")
            acc = f"f{j}"
        lines.append(f"force {acc}")
    else:
        raise ProgramError(f"unknown benchmark {spec.name!r}; choose one of "
                           f"{BENCH_NAMES}")
    return "\n".join(lines) + "\n"


def program_to_taskdag(text: str) -> TaskDag:
    prog = parse_program(text)
    session, root = replay_program(prog, Session())
    return session.force(root)


def subcluster(cluster: ClusterSpec, n_nodes: int) -> ClusterSpec:
    """Master plus the first n-1 workers in declaration order."""
    if n_nodes < 1 or n_nodes > len(cluster.nodes):
        raise ProgramError(f"cannot take {n_nodes} nodes from a "
                           f"{len(cluster.nodes)}-node cluster")
    keep = [cluster.master]
    for node in cluster.nodes:
        if len(keep) >= n_nodes:
            break
        if node.id != cluster.master:
            keep.append(node.id)
    nodes = [n for n in cluster.nodes if n.id in keep]
    links = [l for l in cluster.links if l.src in keep and l.dst in keep]
    return replace_cluster(cluster, nodes=nodes, links=links)


SWEEP_COLUMNS = ("name", "size", "nodes", "tile", "cache", "dynamic",
                 "workers", "comms", "sim_makespan", "sim_startup",
                 "exec_makespan", "speedup")


def sweep(spec: BenchmarkSpec, cluster: ClusterSpec, model: TimeModel,
          axes: Optional[dict] = None, execute: bool = False,
          out_path: Optional[str] = None) -> list[dict]:
    """One row per configuration point; simulated (and measured) times."""
    axes = dict(axes or {})
    n = spec.matrix_size
    node_axis = list(axes.get("nodes", [len(cluster.nodes)]))
    tile_axis = list(axes.get("tile_sizes", default_ladder(n)))
    cache_axis = list(axes.get("cache", [True]))
    dyn_axis = list(axes.get("dynamic_tiling", [False]))
    master = cluster.node(cluster.master)
    worker_axis = list(axes.get("worker_procs", [master.worker_procs]))
    comm_axis = list(axes.get("comm_procs", [master.comm_procs]))
    if not all((node_axis, tile_axis, cache_axis, dyn_axis, worker_axis,
                comm_axis)):
        raise ProgramError("sweep axes must be nonempty")

    text = generate(spec)
    dag = program_to_taskdag(text)
    inputs = (executor.materialize_inputs(dag.inputs.values())
              if execute else None)
    tdags = {t: tiling.tile_task_dag(dag, (t, t)) for t in tile_axis}

    rows = []
    for nodes in node_axis:
        sub = subcluster(cluster, nodes)
        for workers in worker_axis:
            for comms in comm_axis:
                try:
                    variant = sub.with_master_config(workers, comms)
                except Exception:
                    continue
                for tile in tile_axis:
                    for cache in cache_axis:
                        for dyn in dyn_axis:
                            opts = scheduler.ScheduleOpts(
                                dynamic_tiling=dyn, cache=cache)
                            sched = scheduler.schedule(
                                tdags[tile], variant, model, opts)
                            sim = simulator.simulate(sched, model, variant)
                            row = {
                                "name": spec.name, "size": n, "nodes": nodes,
                                "tile": tile, "cache": cache, "dynamic": dyn,
                                "workers": workers, "comms": comms,
                                "sim_makespan": sim.makespan,
                                "sim_startup": sim.startup_duration,
                                "exec_makespan": "",
                                "speedup": "",
                            }
                            if execute:
                                report = executor.execute(sched, inputs,
                                                          variant)
                                row["exec_makespan"] = \
                                    report.measured_makespan
                            rows.append(row)

    # speedup against the 1-node row of the same configuration
    base: dict[tuple, float] = {}
    for row in rows:
        if row["nodes"] == 1:
            key = (row["tile"], row["cache"], row["dynamic"],
                   row["workers"], row["comms"])
            base[key] = row["sim_makespan"]
    for row in rows:
        key = (row["tile"], row["cache"], row["dynamic"], row["workers"],
               row["comms"])
        if key in base and row["sim_makespan"] > 0:
            row["speedup"] = round(base[key] / row["sim_makespan"], 4)

    if out_path:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    return rows


def rows_to_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
