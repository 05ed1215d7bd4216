"""Execution of schedules on an emulated heterogeneous cluster.

Nodes are in-process worker/communicator thread pools with a shared
per-node tile store; links are pacing channels that sleep long enough to
honour their bandwidth throttle and the per-communicator rate cap.  Task
placements come from the schedule; starts are as-early-as-possible once
dependencies arrive.  Numeric results are real (float64 kernels), so
every run can be checked against the sequential reference evaluator.
"""

from __future__ import annotations

import hashlib
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cluster import ClusterSpec, transfer_rate
from .errors import ExecutionError, ProgramError, ShapeError
from .expr import MatrixRef, Program, parse_program
from .scheduler import Schedule, ScheduledTask
from .tiling import TiledTaskDag

_eval_lock = threading.Lock()
_eval_count = 0


def evaluation_count() -> int:
    return _eval_count


def reset_evaluation_count() -> None:
    global _eval_count
    with _eval_lock:
        _eval_count = 0


def _count_eval():
    global _eval_count
    with _eval_lock:
        _eval_count += 1


# --- input generation -----------------------------------------------------------

def gen_matrix(ref: MatrixRef) -> np.ndarray:
    """Deterministic input matrix for a (seed, dist) spec."""
    rng = np.random.default_rng(np.random.PCG64(ref.seed))
    data = rng.random((ref.rows, ref.cols))
    if ref.dist == "stochastic":
        data /= data.sum(axis=1, keepdims=True)
    return data


def materialize_inputs(refs) -> dict[str, np.ndarray]:
    return {r.id: gen_matrix(r) for r in refs}


# --- kernels ---------------------------------------------------------------------

def run_kernel(kind: str, operands: list[np.ndarray],
               scalar: Optional[float] = None,
               out: Optional[np.ndarray] = None) -> Optional[np.ndarray]:
    """One tile-level kernel; ``matmul`` accumulates into ``out``."""
    _count_eval()
    if kind == "matmul":
        a, b = operands
        out += a @ b
        return out
    if kind == "add":
        return operands[0] + operands[1]
    if kind == "sub":
        return operands[0] - operands[1]
    if kind == "emul":
        return operands[0] * operands[1]
    if kind == "sadd":
        return operands[0] + scalar
    if kind == "ssub":
        return operands[0] - scalar
    if kind == "smul":
        return operands[0] * scalar
    if kind == "sdiv":
        return operands[0] / scalar
    if kind == "sin":
        return np.sin(operands[0])
    if kind == "cos":
        return np.cos(operands[0])
    if kind == "transpose":
        return np.ascontiguousarray(operands[0].T)
    raise ExecutionError(f"unknown kernel kind {kind!r}")


def max_rel_error(result: np.ndarray, reference: np.ndarray) -> float:
    """Elementwise |res - ref| / max(|ref|, 1)."""
    if result.shape != reference.shape:
        raise ShapeError(f"shape mismatch {result.shape} vs "
                         f"{reference.shape}")
    denom = np.maximum(np.abs(reference), 1.0)
    return float(np.max(np.abs(result - reference) / denom))


# --- reference evaluators ----------------------------------------------------------

def reference_eval(program, inputs: Optional[dict[str, np.ndarray]] = None
                   ) -> np.ndarray:
    """Single-threaded eager evaluation of a program (the oracle)."""
    prog = parse_program(program) if isinstance(program, str) else program
    if not isinstance(prog, Program):
        raise ProgramError("reference_eval expects a Program or source text")
    env: dict[str, np.ndarray] = {}
    for st in prog.statements:
        if st[0] == "input":
            ref = st[1]
            env[ref.id] = (inputs[ref.id] if inputs and ref.id in inputs
                           else gen_matrix(ref))
            if env[ref.id].shape != (ref.rows, ref.cols):
                raise ShapeError(f"input {ref.id}: expected "
                                 f"{(ref.rows, ref.cols)}, got "
                                 f"{env[ref.id].shape}")
        elif st[0] in ("add", "sub", "mul", "emul"):
            op, name, a, b = st
            _count_eval()
            if op == "mul":
                env[name] = env[a] @ env[b]
            elif op == "add":
                env[name] = env[a] + env[b]
            elif op == "sub":
                env[name] = env[a] - env[b]
            else:
                env[name] = env[a] * env[b]
        elif st[0] in ("sadd", "ssub", "smul", "sdiv"):
            op, name, a, s = st
            env[name] = run_kernel(op, [env[a]], scalar=s)
        else:
            op, name, a = st
            env[name] = run_kernel(op, [env[a]])
    return env[prog.force_ids[-1]]


def evaluate_tiled(tdag: TiledTaskDag, inputs: dict[str, np.ndarray]
                   ) -> np.ndarray:
    """Sequential in-order evaluation of a tiled DAG (test oracle)."""
    buffers: dict[str, np.ndarray] = {}

    def fetch(key: str) -> np.ndarray:
        if key not in buffers:
            t = tdag.tiles[key]
            if not t.sheet.startswith("i:"):
                raise ExecutionError(f"tile {key} read before produced")
            src = inputs[t.sheet[2:]]
            buffers[key] = np.ascontiguousarray(
                src[t.row_slice, t.col_slice])
        return buffers[key]

    root_shape = tdag.base.task_map()[tdag.base.root].out_shape
    result = np.zeros(root_shape)
    for task in tdag.tasks:
        if task.kind == "alloc":
            t = tdag.tiles[task.out]
            buffers[task.out] = np.empty((t.rows, t.cols))
        elif task.kind == "zero":
            buffers[task.out].fill(0.0)
        elif task.kind == "matmul":
            run_kernel("matmul", [fetch(k) for k in task.reads],
                       out=buffers[task.out])
        elif task.kind == "merge":
            t = tdag.tiles[task.out]
            parent = np.empty((t.rows, t.cols))
            for sk in task.reads:
                s = tdag.tiles[sk]
                parent[s.row_lo - t.row_lo:s.row_hi - t.row_lo + 1,
                       s.col_lo - t.col_lo:s.col_hi - t.col_lo + 1] = fetch(sk)
            buffers[task.out] = parent
        elif task.kind == "copy_back":
            t = tdag.tiles[task.reads[0]]
            result[t.row_slice, t.col_slice] = fetch(task.reads[0])
        else:
            buffers[task.out] = run_kernel(
                task.kind, [fetch(k) for k in task.reads],
                scalar=task.scalar)
    return result


# --- emulated transport -------------------------------------------------------------

_QUANTUM = 0.002  # pacing granularity in seconds


class Channel:
    """Directed link pacing transfers at min(per-comm rate, fair share)."""

    def __init__(self, bytes_per_s: float, per_comm_rate: float):
        self.throttle = bytes_per_s
        self.per_comm = per_comm_rate
        self._active = 0
        self._lock = threading.Lock()

    def transfer(self, nbytes: int) -> float:
        """Sleep long enough to respect the throttle; returns seconds."""
        with self._lock:
            self._active += 1
        slept = 0.0
        remaining = float(nbytes)
        try:
            while remaining > 1e-6:  # sub-byte residue is rounding noise
                with self._lock:
                    rate = transfer_rate(self.per_comm, self.throttle,
                                         self._active)
                dt = min(_QUANTUM, remaining / rate)
                time.sleep(dt)
                slept += dt
                remaining -= rate * dt
        finally:
            with self._lock:
                self._active -= 1
        return slept


@dataclass
class EmulatedNode:
    """Per-node tile store: shared entries are refcounted so a stale
    eviction command cannot drop a copy that was delivered again."""

    id: str
    shared: dict[str, tuple[np.ndarray, int]] = field(default_factory=dict)
    private: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def put(self, key: str, buf: np.ndarray, for_task: str = "") -> None:
        with self.lock:
            if for_task:
                self.private[(key, for_task)] = buf
            else:
                count = self.shared[key][1] if key in self.shared else 0
                self.shared[key] = (buf, count + 1)

    def get(self, key: str, consumer: str) -> np.ndarray:
        with self.lock:
            buf = self.private.get((key, consumer))
            if buf is None and key in self.shared:
                buf = self.shared[key][0]
        if buf is None:
            raise ExecutionError(f"node {self.id}: tile {key} not resident "
                                 f"for task {consumer}")
        return buf

    def evict(self, key: str) -> None:
        with self.lock:
            if key in self.shared:
                buf, count = self.shared[key]
                if count <= 1:
                    del self.shared[key]
                else:
                    self.shared[key] = (buf, count - 1)


@dataclass
class RunReport:
    measured_makespan: float
    task_times: dict[str, tuple[float, float]]
    result_digest: str
    send_count: int
    max_abs_error: Optional[float] = None
    simulated_makespan: Optional[float] = None
    output: Optional[np.ndarray] = None

    def duration(self, task_id: str) -> float:
        s, f = self.task_times[task_id]
        return f - s

    def to_json_dict(self) -> dict:
        doc = {
            "measured_makespan": self.measured_makespan,
            "result_digest": self.result_digest,
            "send_count": self.send_count,
            "tasks": len(self.task_times),
        }
        if self.max_abs_error is not None:
            doc["max_abs_error"] = self.max_abs_error
        if self.simulated_makespan is not None:
            doc["simulated_makespan"] = self.simulated_makespan
            if self.simulated_makespan > 0:
                doc["gap"] = (self.measured_makespan /
                              self.simulated_makespan - 1.0)
        return doc


class _Runtime:
    def __init__(self, sched: Schedule, inputs: dict[str, np.ndarray],
                 cluster: ClusterSpec):
        if sched.tdag is None:
            raise ExecutionError("schedule carries no tiled DAG; execute "
                                 "through the in-memory pipeline")
        if sched.cluster_signature != cluster.signature():
            raise ExecutionError("schedule was produced for a different "
                                 "cluster configuration")
        self.sched = sched
        self.tdag: TiledTaskDag = sched.tdag
        self.cluster = cluster
        self.inputs = inputs
        self.nodes = {n.id: EmulatedNode(n.id) for n in cluster.nodes}
        self.scales = {n.id: cluster.class_scales.get(n.compute_class, 1.0)
                       for n in cluster.nodes}
        self.channels = {
            (l.src, l.dst): Channel(l.bytes_per_s, cluster.comm_proc_rate)
            for l in cluster.links}
        self.done = {t.id: threading.Event() for t in sched.tasks}
        self.times: dict[str, tuple[float, float]] = {}
        self.payloads: dict[str, np.ndarray] = {}
        self.errors: list[BaseException] = []
        self.err_lock = threading.Lock()
        self.t0 = 0.0
        root_shape = self.tdag.base.task_map()[self.tdag.base.root].out_shape
        self.result = np.zeros(root_shape)

        master = self.nodes[cluster.master]
        for key in sorted(self.tdag.input_tiles):
            t = self.tdag.tiles[key]
            src = inputs[t.sheet[2:]]
            # the master's own inputs are never evictable: high refcount
            master.shared[key] = (np.ascontiguousarray(
                src[t.row_slice, t.col_slice]), 1 << 30)

    def _fail(self, exc: BaseException):
        with self.err_lock:
            self.errors.append(exc)

    def _wait(self, task: ScheduledTask, dep: str, budget: float):
        if not self.done[dep].wait(timeout=budget):
            raise ExecutionError(f"watchdog: task {task.id} still waiting "
                                 f"for {dep} after {budget:.1f}s")

    def _run_task(self, task: ScheduledTask, budget: float):
        for dep in task.deps:
            self._wait(task, dep, budget)
        node = self.nodes[task.node]
        start = time.perf_counter() - self.t0
        scale = self.scales[task.node]

        if task.kind == "send":
            buf = node.get(task.tile, task.for_task or "__send__")
            channel = self.channels[(task.node, task.peer.split(":", 1)[0])]
            channel.transfer(task.nbytes)
            self.payloads[task.pair] = buf
        elif task.kind == "recv":
            buf = self.payloads.pop(task.pair)
            node.put(task.tile, buf, task.for_task)
        elif task.kind == "cache_place":
            pass  # placement happened on arrival
        elif task.kind == "cache_evict":
            node.evict(task.tile)
        elif task.kind == "alloc":
            t = self.tdag.tiles[task.out]
            node.put(task.out, np.empty((t.rows, t.cols)))
        elif task.kind == "zero":
            node.get(task.out, task.id).fill(0.0)
        elif task.kind == "merge":
            t = self.tdag.tiles[task.out]
            parent = np.empty((t.rows, t.cols))
            for sk in task.reads:
                s = self.tdag.tiles[sk]
                sub = node.get(sk, task.id)
                parent[s.row_lo - t.row_lo:s.row_hi - t.row_lo + 1,
                       s.col_lo - t.col_lo:s.col_hi - t.col_lo + 1] = sub
            node.put(task.out, parent, task.for_task)
            self._pad(start, scale)
        elif task.kind == "copy_back":
            t = self.tdag.tiles[task.reads[0]]
            self.result[t.row_slice, t.col_slice] = node.get(
                task.reads[0], task.id)
        elif task.kind == "compute":
            operands = [node.get(k, task.id) for k in task.reads]
            if task.op == "matmul":
                out = node.get(task.out, task.id)
                run_kernel("matmul", operands, out=out)
            else:
                out = run_kernel(task.op, operands, scalar=task.scalar)
                node.put(task.out, out)
            if not np.all(np.isfinite(out)):
                raise ExecutionError(f"task {task.id}: non-finite values in "
                                     "output tile")
            self._pad(start, scale)
        else:
            raise ExecutionError(f"unknown scheduled kind {task.kind!r}")

        finish = time.perf_counter() - self.t0
        self.times[task.id] = (start, finish)
        self.done[task.id].set()

    def _pad(self, start: float, scale: float):
        if scale > 1.0:
            elapsed = time.perf_counter() - self.t0 - start
            time.sleep(elapsed * (scale - 1.0))

    def _slot_runner(self, tasks: list[ScheduledTask], budget: float):
        for task in tasks:
            if self.errors:
                return
            try:
                self._run_task(task, budget)
            except BaseException as exc:  # surfaced after join
                self._fail(exc)
                self.done[task.id].set()
                return

    def run(self, watchdog: Optional[float] = None) -> RunReport:
        per_proc = self.sched.by_process()
        budget = watchdog or max(30.0, 20.0 * self.sched.makespan + 10.0)
        threads = [threading.Thread(target=self._slot_runner,
                                    args=(tasks, budget), daemon=True,
                                    name=f"slot-{proc}")
                   for proc, tasks in sorted(per_proc.items())]
        self.t0 = time.perf_counter()
        for th in threads:
            th.start()
        deadline = time.monotonic() + budget * 1.5
        for th in threads:
            th.join(timeout=max(0.1, deadline - time.monotonic()))
            if th.is_alive():
                self._fail(ExecutionError(
                    f"watchdog: {th.name} still running; deadlock suspected"))
                break
        if self.errors:
            raise self.errors[0]

        makespan = max((f for _, f in self.times.values()), default=0.0)
        digest = hashlib.sha256(self.result.tobytes()).hexdigest()
        sends = sum(1 for t in self.sched.tasks if t.kind == "send")
        return RunReport(measured_makespan=makespan, task_times=self.times,
                         result_digest=digest, send_count=sends,
                         output=self.result)


def execute(sched: Schedule, inputs: dict[str, np.ndarray],
            cluster: ClusterSpec, watchdog: Optional[float] = None
            ) -> RunReport:
    """Run a schedule on the emulated cluster; returns measured timings."""
    return _Runtime(sched, inputs, cluster).run(watchdog)
