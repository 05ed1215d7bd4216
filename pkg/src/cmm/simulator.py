"""Discrete-event replay of a schedule to predict its makespan.

Replays task placements under dependency, process-occupancy and
communicator FIFO constraints.  Transfers move as fluid flows: all
concurrent flows on one directed link share its bandwidth equally, each
capped by the per-transfer nominal rate; rates are recomputed at every
flow start/finish.  ``zero_comm`` mode sets every transfer duration to
zero, which yields the communication-free upper bound.
"""

from __future__ import annotations

import heapq
import time as _time
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .cluster import ClusterSpec
from .errors import SimulationError
from .scheduler import (Schedule, ScheduleOpts, ScheduledTask, SEND_OVERHEAD,
                        schedule as build_schedule)
from .timemodel import TimeModel

_EV_FINISH, _EV_GATE, _EV_TRY = 0, 1, 2


@dataclass(frozen=True)
class SimEvent:
    time: float
    kind: str  # task_start|task_finish|transfer_start|transfer_finish|cache_hit|cache_miss
    subject: str


@dataclass
class SimResult:
    makespan: float
    per_node_busy: dict[str, float]
    startup_duration: float
    event_log: list[SimEvent]
    mode: str = "normal"
    select_wall_time: float = 0.0

    def busy_fraction(self, node: str, worker_slots: int) -> float:
        if self.makespan <= 0 or worker_slots == 0:
            return 0.0
        return self.per_node_busy.get(node, 0.0) / (self.makespan *
                                                    worker_slots)


class _Flow:
    __slots__ = ("rid", "link", "remaining", "factor", "last", "rcap",
                 "version")

    def __init__(self, rid: str, link: tuple[str, str], work: float,
                 rcap: float):
        self.rid = rid
        self.link = link
        self.remaining = work
        self.factor = 1.0
        self.last = 0.0
        self.rcap = rcap
        self.version = 0


def simulate(sched: Schedule, model: TimeModel, cluster: ClusterSpec,
             mode: str = "normal") -> SimResult:
    if mode not in ("normal", "zero_comm"):
        raise SimulationError(f"unknown simulation mode {mode!r}")
    classes = {n.id: n.compute_class for n in cluster.nodes}
    tasks = sched.task_map()
    queues = sched.by_process()
    ptr = {p: 0 for p in queues}
    avail = {p: 0.0 for p in queues}
    blocked = {p: False for p in queues}

    ndeps: dict[str, int] = {}
    dependents: dict[str, list[str]] = {}
    released: dict[str, float] = {}
    for t in sched.tasks:
        deps = t.deps
        if t.kind == "recv":
            # a recv waits on the send's *start* (gated below), not finish
            deps = tuple(d for d in deps if tasks[d].kind != "send")
        ndeps[t.id] = len(deps)
        if not deps:
            released[t.id] = 0.0
        for d in deps:
            dependents.setdefault(d, []).append(t.id)
    recv_of_send = {}
    send_of_recv = {}
    for t in sched.tasks:
        if t.kind == "recv":
            for d in t.deps:
                if tasks[d].kind == "send":
                    recv_of_send[d] = t.id
                    send_of_recv[t.id] = d
            if t.id not in send_of_recv:
                raise SimulationError(f"recv {t.id} lacks a send dependency")
            ndeps[t.id] += 1  # gate counts as one dependency

    start_t: dict[str, float] = {}
    finish_t: dict[str, float] = {}
    gate_open: dict[str, float] = {}
    produced: dict[tuple[str, str], float] = {}
    events: list[SimEvent] = []
    busy: dict[str, float] = {}
    flows: dict[str, _Flow] = {}
    link_flows: dict[tuple[str, str], set] = {}

    # Which tile each dependency supplies a task with (recv or merge):
    # availability checks are dependency-exact, so command reordering at
    # equal timestamps cannot produce spurious misses.
    suppliers: dict[str, dict[str, str]] = {}
    for t in sched.tasks:
        for d in t.deps:
            dt = tasks[d]
            if dt.kind == "recv" and dt.for_task in ("", t.id):
                suppliers.setdefault(t.id, {})[dt.tile] = dt.for_task
            elif dt.kind == "merge" and dt.for_task in ("", t.id):
                suppliers.setdefault(t.id, {})[dt.out] = dt.for_task

    heap: list = []
    seq = 0

    def push(when: float, prio: int, payload: tuple):
        nonlocal seq
        seq += 1
        heapq.heappush(heap, (when, prio, seq, payload))

    def duration_of(t: ScheduledTask) -> float:
        if t.kind in ("cache_place", "cache_evict"):
            return 0.0
        op = t.op or t.kind
        return model.predict_task(classes[t.node], op, t.dims)

    def nominal_comm(t: ScheduledTask) -> float:
        if mode == "zero_comm":
            return 0.0
        peer_node = t.peer.split(":", 1)[0]
        src, dst = ((t.node, peer_node) if t.kind == "send"
                    else (peer_node, t.node))
        return model.predict_comm(f"{src}->{dst}", t.nbytes)

    def check_reads(t: ScheduledTask, now: float):
        if t.kind not in ("compute", "zero", "merge", "copy_back"):
            return
        mine = suppliers.get(t.id, {})
        for key in t.reads:
            if (t.node, key) in produced:
                continue
            if sched.tdag is not None and key in sched.tdag.input_tiles \
                    and t.node == cluster.master:
                continue
            if key in mine:
                if mine[key] == "":
                    events.append(SimEvent(now, "cache_hit", t.id))
                continue
            if sched.tdag is None:
                continue  # standalone schedules carry no tile map
            events.append(SimEvent(now, "cache_miss", t.id))
            raise SimulationError(
                f"task {t.id} on {t.node} misses operand {key} at t={now}")

    def start_task(t: ScheduledTask, at: float):
        start_t[t.id] = at
        if t.kind == "send":
            if mode == "zero_comm":
                push(at, _EV_FINISH, ("finish", t.id))
                gate_open[recv_of_send[t.id]] = at
                open_gate(recv_of_send[t.id], at)
            else:
                r = nominal_comm(t)
                when = at + SEND_OVERHEAD * r
                push(when, _EV_GATE, ("gate", recv_of_send[t.id]))
                blocked[t.process] = True
            return
        if t.kind == "recv":
            events.append(SimEvent(at, "transfer_start", t.id))
            if mode == "zero_comm":
                push(at, _EV_FINISH, ("finish", t.id))
                return
            r = nominal_comm(t)
            link = (tasks[send_of_recv[t.id]].node, t.node)
            rcap = (t.nbytes / r) if r > 0 else 0.0
            flow = _Flow(t.id, link, r, rcap)
            flow.last = at
            flows[t.id] = flow
            link_flows.setdefault(link, set()).add(flow)
            blocked[t.process] = True
            _rebalance(link, at)
            return
        check_reads(t, at)
        if t.kind not in ("cache_place", "cache_evict"):
            events.append(SimEvent(at, "task_start", t.id))
        dur = duration_of(t)
        push(at + dur, _EV_FINISH, ("finish", t.id))

    def _rebalance(link: tuple[str, str], now: float):
        group = link_flows.get(link, set())
        if not group:
            return
        bandwidth = cluster.link(*link).bytes_per_s
        n = len(group)
        for f in group:
            f.remaining -= f.factor * (now - f.last)
            f.last = now
            f.factor = 1.0 if f.rcap <= 0 else min(
                1.0, (bandwidth / n) / f.rcap)
            f.version += 1
            eta = now + (f.remaining / f.factor if f.factor > 0 else 0.0)
            push(max(eta, now), _EV_FINISH, ("flow", f.rid, f.version))

    def open_gate(rid: str, when: float):
        ndeps[rid] -= 1
        released[rid] = max(released.get(rid, 0.0), when)
        if ndeps[rid] == 0:
            push(when, _EV_TRY, ("try", tasks[rid].process))

    def finish_task(t: ScheduledTask, at: float):
        finish_t[t.id] = at
        if t.kind == "recv":
            events.append(SimEvent(at, "transfer_finish", t.id))
            send = tasks[send_of_recv[t.id]]
            if send.id not in finish_t:  # normal mode: send ends on delivery
                finish_t[send.id] = at
                blocked[send.process] = False
                avail[send.process] = max(avail[send.process], at)
                push(at, _EV_TRY, ("try", send.process))
                _finish_common(send, at)
        elif t.kind in ("send", "cache_place", "cache_evict"):
            pass  # bookkeeping; availability is dependency-exact
        else:
            events.append(SimEvent(at, "task_finish", t.id))
            if t.out:
                produced[(t.node, t.out)] = at
            if t.process.split(":", 1)[1].startswith("w"):
                busy[t.node] = busy.get(t.node, 0.0) + (at - start_t[t.id])
        _finish_common(t, at)

    def _finish_common(t: ScheduledTask, at: float):
        for dep_id in dependents.get(t.id, ()):  # release dependents
            ndeps[dep_id] -= 1
            released[dep_id] = max(released.get(dep_id, 0.0), at)
            if ndeps[dep_id] == 0:
                push(at, _EV_TRY, ("try", tasks[dep_id].process))

    def try_slot(proc: str, now: float):
        while ptr[proc] < len(queues[proc]) and not blocked[proc]:
            head = queues[proc][ptr[proc]]
            if ndeps[head.id] > 0:
                return
            if max(avail[proc], released.get(head.id, 0.0)) > now + 1e-15:
                # the event that lifts this constraint re-triggers the queue
                return
            at = now
            ptr[proc] += 1
            start_task(head, at)
            if head.kind in ("recv", "send"):
                if blocked[proc]:
                    return
                avail[proc] = max(avail[proc], at)
            else:
                avail[proc] = at + duration_of(head)

    for proc in queues:
        push(0.0, _EV_TRY, ("try", proc))

    guard = 0
    limit = 500 * (len(sched.tasks) + 20)
    while heap:
        guard += 1
        if guard > limit:
            raise SimulationError("simulation event budget exhausted "
                                  "(cyclic wait?)")
        when, prio, _, payload = heapq.heappop(heap)
        kind = payload[0]
        if kind == "try":
            try_slot(payload[1], when)
        elif kind == "gate":
            open_gate(payload[1], when)
        elif kind == "flow":
            rid, version = payload[1], payload[2]
            flow = flows.get(rid)
            if flow is None or flow.version != version:
                continue
            flow.remaining -= flow.factor * (when - flow.last)
            flow.last = when
            if flow.remaining > 1e-12:
                continue
            link = flow.link
            link_flows[link].discard(flow)
            del flows[rid]
            t = tasks[rid]
            blocked[t.process] = False
            avail[t.process] = max(avail[t.process], when)
            finish_task(t, when)
            push(when, _EV_TRY, ("try", t.process))
            _rebalance(link, when)
        elif kind == "finish":
            t = tasks[payload[1]]
            if t.id in finish_t:
                continue
            finish_task(t, when)
            push(when, _EV_TRY, ("try", t.process))

    missing = [t.id for t in sched.tasks if t.id not in finish_t]
    if missing:
        raise SimulationError(f"{len(missing)} tasks never ran "
                              f"(first: {missing[0]}); cyclic wait?")

    makespan = max(finish_t.values(), default=0.0)
    firsts: dict[str, float] = {}
    for t in sched.tasks:
        if t.kind in ("compute", "copy_back"):
            node = t.node
            s = start_t[t.id]
            if node not in firsts or s < firsts[node]:
                firsts[node] = s
    startup = max(firsts.values()) if firsts else 0.0
    events.sort(key=lambda e: (e.time, e.kind, e.subject))
    return SimResult(makespan=makespan, per_node_busy=busy,
                     startup_duration=startup, event_log=events, mode=mode)


def predict_and_select(tdags: Iterable, cluster: ClusterSpec,
                       model: TimeModel,
                       opts: Optional[ScheduleOpts] = None,
                       mode: str = "normal", parallelism: int = 4
                       ) -> tuple[Schedule, SimResult]:
    """Schedule + simulate every candidate tiling; smallest makespan wins."""
    from concurrent.futures import ThreadPoolExecutor

    opts = opts or ScheduleOpts()
    tdags = list(tdags)
    if not tdags:
        raise SimulationError("no candidate DAGs to select from")
    wall0 = _time.perf_counter()

    def evaluate(tdag):
        sched = build_schedule(tdag, cluster, model, opts)
        return sched, simulate(sched, model, cluster, mode)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(evaluate, tdags))
    best = min(
        results,
        key=lambda pair: (pair[1].makespan,
                          pair[0].tile_size[0] * pair[0].tile_size[1]))
    best[1].select_wall_time = _time.perf_counter() - wall0
    return best
