"""Cache-aware list scheduling of tiled task DAGs onto cluster processes.

Classic HEFT skeleton: tasks are ordered by upward rank and placed on the
worker process giving the earliest finish time, with insertion-based gap
filling.  Extensions: per-transfer communicator booking (a send occupies
one sender-side and one receiver-side communicator), a scheduler-driven
per-node tile cache whose placement/eviction commands are part of the
schedule, and startup-phase operand splitting (smaller sub-tiles fan out
over several communicators, then merge on the consuming node).
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right, insort
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from . import tiling
from .cluster import ClusterSpec, link_key
from .errors import IntegrityError, PredictionError, SchedulingError
from .timemodel import TimeModel

INF = math.inf
SEND_OVERHEAD = 0.05  # send duration = (1 + overhead) * nominal transfer time
DEFAULT_CACHE_TILES = 8

_KIND_MAP = {"alloc": "alloc", "zero": "zero", "merge": "merge",
             "copy_back": "copy_back"}


def sched_kind(tile_kind: str) -> str:
    return _KIND_MAP.get(tile_kind, "compute")


@dataclass(frozen=True)
class ScheduledTask:
    id: str
    kind: str  # compute|send|recv|alloc|zero|merge|cache_place|cache_evict|copy_back
    process: str  # "<node>:w<i>" or "<node>:c<i>"
    start: float
    finish: float
    op: str = ""  # tiled task kind for compute-like tasks
    out: str = ""
    reads: tuple[str, ...] = ()
    dims: tuple[int, int, int] = (0, 0, 0)
    scalar: Optional[float] = None
    deps: tuple[str, ...] = ()
    peer: str = ""  # paired process for send/recv
    pair: str = ""  # transfer id shared by a send/recv pair
    tile: str = ""  # transferred or cached tile
    nbytes: int = 0
    for_task: str = ""  # non-empty: delivery is private to that consumer

    @property
    def node(self) -> str:
        return self.process.split(":", 1)[0]


@dataclass
class ScheduleOpts:
    dynamic_tiling: bool = False
    cache: bool = True
    cache_capacity: Optional[int] = None  # bytes; None = 8 tiles
    split_factor: int = 2


@dataclass
class Schedule:
    tasks: list[ScheduledTask]
    makespan: float
    tile_size: tuple[int, int]
    cluster_signature: str
    cache_capacity: int
    opts: ScheduleOpts
    cache_trace: dict[str, list[dict]] = field(default_factory=dict)
    tdag: Optional[tiling.TiledTaskDag] = None

    def task_map(self) -> dict[str, ScheduledTask]:
        return {t.id: t for t in self.tasks}

    def by_process(self) -> dict[str, list[ScheduledTask]]:
        out: dict[str, list[ScheduledTask]] = {}
        for t in sorted(self.tasks, key=lambda t: (t.start, t.finish, t.id)):
            out.setdefault(t.process, []).append(t)
        return out

    def first_compute_starts(self) -> dict[str, float]:
        """Per node: earliest start of a real compute task."""
        firsts: dict[str, float] = {}
        for t in self.tasks:
            if t.kind in ("compute", "copy_back"):
                node = t.node
                if node not in firsts or t.start < firsts[node]:
                    firsts[node] = t.start
        return firsts

    def predicted_startup(self) -> float:
        firsts = self.first_compute_starts()
        return max(firsts.values()) if firsts else 0.0

    def to_json(self) -> str:
        doc = {
            "format": "cmm-schedule/1",
            "makespan": self.makespan,
            "tile_size": list(self.tile_size),
            "cluster_signature": self.cluster_signature,
            "cache_capacity": self.cache_capacity,
            "opts": {"dynamic_tiling": self.opts.dynamic_tiling,
                     "cache": self.opts.cache,
                     "split_factor": self.opts.split_factor},
            "cache_trace": self.cache_trace,
            "tasks": [{
                "id": t.id, "kind": t.kind, "process": t.process,
                "start": t.start, "finish": t.finish, "op": t.op,
                "out": t.out, "reads": list(t.reads), "dims": list(t.dims),
                "scalar": t.scalar, "deps": list(t.deps), "peer": t.peer,
                "pair": t.pair, "tile": t.tile, "bytes": t.nbytes,
                "for_task": t.for_task,
            } for t in self.tasks],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Schedule":
        doc = json.loads(text)
        if doc.get("format") != "cmm-schedule/1":
            raise IntegrityError(f"unexpected schedule format "
                                 f"{doc.get('format')!r}")
        tasks = [ScheduledTask(
            id=d["id"], kind=d["kind"], process=d["process"],
            start=d["start"], finish=d["finish"], op=d["op"], out=d["out"],
            reads=tuple(d["reads"]), dims=tuple(d["dims"]),
            scalar=d["scalar"], deps=tuple(d["deps"]), peer=d["peer"],
            pair=d["pair"], tile=d["tile"], nbytes=d["bytes"],
            for_task=d["for_task"]) for d in doc["tasks"]]
        opts = ScheduleOpts(dynamic_tiling=doc["opts"]["dynamic_tiling"],
                            cache=doc["opts"]["cache"],
                            split_factor=doc["opts"].get("split_factor", 2))
        return cls(tasks=tasks, makespan=doc["makespan"],
                   tile_size=tuple(doc["tile_size"]),
                   cluster_signature=doc["cluster_signature"],
                   cache_capacity=doc["cache_capacity"], opts=opts,
                   cache_trace=doc.get("cache_trace", {}))


# --- upward rank ---------------------------------------------------------------

def upward_rank(tdag: tiling.TiledTaskDag, model: TimeModel,
                cluster: ClusterSpec) -> dict[str, float]:
    """rank(t) = mean compute cost + max over successors of
    (mean link cost of the produced tile + rank(successor))."""
    classes = cluster.classes()
    links = [l.model_key for l in cluster.links]
    cost_cache: dict[tuple, float] = {}
    comm_cache: dict[int, float] = {}

    def avg_cost(kind, dims) -> float:
        key = (kind, dims)
        if key not in cost_cache:
            cost_cache[key] = sum(model.predict_task(c, kind, dims)
                                  for c in classes) / len(classes)
        return cost_cache[key]

    def avg_comm(nbytes: int) -> float:
        if not links:
            return 0.0
        if nbytes not in comm_cache:
            comm_cache[nbytes] = sum(model.predict_comm(l, nbytes)
                                     for l in links) / len(links)
        return comm_cache[nbytes]

    succs: dict[str, list[str]] = {t.id: [] for t in tdag.tasks}
    for t in tdag.tasks:
        for d in tdag.deps[t.id]:
            succs[d].append(t.id)

    rank: dict[str, float] = {}
    for task in reversed(tdag.tasks):
        tail = 0.0
        if succs[task.id]:
            w = avg_comm(tdag.tiles[task.out].nbytes) if task.out else 0.0
            tail = max(w + rank[s] for s in succs[task.id])
        rank[task.id] = avg_cost(task.kind, task.dims) + tail
    return rank


# --- slot timelines ------------------------------------------------------------

class _Timeline:
    """Non-overlapping busy intervals per process slot."""

    __slots__ = ("starts", "finishes")

    def __init__(self):
        self.starts: list[float] = []
        self.finishes: list[float] = []

    def insert(self, start: float, finish: float) -> None:
        i = bisect_right(self.starts, start)
        self.starts.insert(i, start)
        self.finishes.insert(i, finish)


def _find_gap(tl: _Timeline, extras: list[tuple[float, float]],
              ready: float, dur: float) -> float:
    """Earliest start >= ready of a free window of length dur."""
    starts, finishes = tl.starts, tl.finishes
    n = len(starts)
    i = bisect_right(finishes, ready)
    m = len(extras)
    j = 0
    while j < m and extras[j][1] <= ready:
        j += 1
    cur = ready
    while True:
        s1 = starts[i] if i < n else INF
        s2 = extras[j][0] if j < m else INF
        if s1 <= s2:
            if s1 == INF or s1 - cur >= dur:
                return cur
            f = finishes[i]
            i += 1
        else:
            if s2 - cur >= dur:
                return cur
            f = extras[j][1]
            j += 1
        if f > cur:
            cur = f


# --- internal bookings ----------------------------------------------------------

@dataclass
class _Xfer:
    tile: str
    src: str
    dst: str
    send_slot: str
    recv_slot: str
    t0: float
    nominal: float
    nbytes: int
    for_task: str
    dep: str  # producing task id at the source, "" for inputs

    @property
    def recv_start(self) -> float:
        return self.t0 + SEND_OVERHEAD * self.nominal

    @property
    def finish(self) -> float:
        return self.t0 + (1.0 + SEND_OVERHEAD) * self.nominal


@dataclass
class _Merge:
    tile: str
    node: str
    slot: str
    start: float
    dur: float
    xfers: list[_Xfer]

    @property
    def finish(self) -> float:
        return self.start + self.dur


@dataclass
class _Plan:
    node: str
    slot: str = ""
    start: float = 0.0
    finish: float = INF
    deps: tuple[str, ...] = ()
    xfers: list[_Xfer] = field(default_factory=list)
    merges: list[_Merge] = field(default_factory=list)
    window_pins: list[tuple[str, str]] = field(default_factory=list)


class _Trial:
    """Tentative bookings layered over committed state during planning."""

    __slots__ = ("ivals", "ends")

    def __init__(self):
        self.ivals: dict[str, list] = {}  # worker slots: interval overlays
        self.ends: dict[str, float] = {}  # comm slots: FIFO frontier

    def copy(self) -> "_Trial":
        t = _Trial()
        t.ivals = {k: list(v) for k, v in self.ivals.items()}
        t.ends = dict(self.ends)
        return t

    def adopt(self, other: "_Trial") -> None:
        self.ivals = other.ivals
        self.ends = other.ends


class _Window:
    """One residency interval of a cached tile on a node."""

    __slots__ = ("place", "evict", "pin", "provider", "nbytes", "readers")

    def __init__(self, place: float, provider: str, nbytes: int):
        self.place = place
        self.evict: Optional[float] = None
        self.pin = place
        self.provider = provider
        self.nbytes = nbytes
        self.readers: list[str] = []


# --- the scheduler -------------------------------------------------------------

class _Builder:
    def __init__(self, tdag: tiling.TiledTaskDag, cluster: ClusterSpec,
                 model: TimeModel, opts: ScheduleOpts):
        self.tdag = tdag
        self.cluster = cluster
        self.model = model
        self.opts = opts
        self.master = cluster.master
        tr, tc = tdag.tile_size
        self.capacity = (opts.cache_capacity if opts.cache_capacity
                         else DEFAULT_CACHE_TILES * tr * tc *
                         tiling.BYTES_PER_ELEM)
        self.node_ids = [n.id for n in cluster.nodes]
        self.classes = {n.id: n.compute_class for n in cluster.nodes}
        self.wslots = {n.id: [f"{n.id}:w{i}" for i in range(n.worker_procs)]
                       for n in cluster.nodes}
        self.cslots = {n.id: [f"{n.id}:c{i}" for i in range(n.comm_procs)]
                       for n in cluster.nodes}
        self.timelines: dict[str, _Timeline] = {
            s: _Timeline() for slots in self.wslots.values() for s in slots}
        # communicators serve transfers strictly FIFO: append-only booking
        self.comm_end: dict[str, float] = {
            s: 0.0 for slots in self.cslots.values() for s in slots}

        self.home: dict[str, str] = {}
        self.ready: dict[str, float] = {}
        self.producer: dict[str, str] = {}  # tile -> scheduled producer id
        for key in tdag.input_tiles:
            self.home[key] = self.master
            self.ready[key] = 0.0
            self.producer[key] = ""
        # cache windows: one open window per key, closed ones archived in
        # eviction-time order (stale entries skipped after an advance)
        self.open_wins: dict[str, dict[str, _Window]] = {
            n: {} for n in self.node_ids}
        self.closed_wins: dict[str, list] = {n: [] for n in self.node_ids}
        self.win_log: dict[str, list[tuple[str, _Window]]] = {
            n: [] for n in self.node_ids}
        self.pin_instants: dict[str, list[float]] = {n: [] for n in
                                                     self.node_ids}
        self.bound: dict[str, str] = {}
        self.last_writer: dict[str, str] = {}
        self.out: list[ScheduledTask] = []
        self.cache_trace: dict[str, list[dict]] = {n: [] for n in self.node_ids}
        self._seq = 0
        self._mgseq: dict[str, int] = {}

        # future-use positions for Belady-style eviction
        self.reader_pos: dict[str, list[int]] = {}
        self.pos_ptr: dict[str, int] = {}

    # -- helpers --

    def _next_use(self, key: str, after_pos: int) -> int:
        positions = self.reader_pos.get(key, ())
        ptr = self.pos_ptr.get(key, 0)
        while ptr < len(positions) and positions[ptr] <= after_pos:
            ptr += 1
        self.pos_ptr[key] = ptr
        return positions[ptr] if ptr < len(positions) else 1 << 60

    def _duration(self, node: str, kind: str, dims) -> float:
        key = (self.classes[node], kind, dims)
        hit = self._dur_cache.get(key)
        if hit is None:
            hit = self.model.predict_task(*key)
            self._dur_cache[key] = hit
        return hit

    def _finish_lower_bound(self, task: tiling.TiledTask, node: str) -> float:
        """Cheap optimistic finish time: data arrival without any queueing."""
        ready = 0.0
        for key in task.reads:
            home = self.home.get(key)
            if home == node:
                avail = self.ready[key]
            else:
                win = self._open_window(node, key) if self.opts.cache else None
                if win is not None:
                    avail = win.place
                elif home is None:
                    return INF
                else:
                    avail = self.ready[key] + self._comm(
                        home, node, self.tdag.tiles[key].nbytes)
            if avail > ready:
                ready = avail
        if task.out and task.out in self.last_writer:
            ready = max(ready, self._finish_of[self.last_writer[task.out]])
        return ready + self._duration(node, task.kind, task.dims)

    def _comm(self, src: str, dst: str, nbytes: int) -> float:
        return self.model.predict_comm(link_key(src, dst), nbytes)

    def _open_window(self, node: str, key: str) -> Optional[_Window]:
        return self.open_wins[node].get(key)

    def _plan_xfer(self, key: str, src: str, dst: str, trial: "_Trial",
                   for_task: str) -> _Xfer:
        nbytes = self.tdag.tiles[key].nbytes
        nominal = self._comm(src, dst, nbytes)
        ready = self.ready[key]
        send_span = (1.0 + SEND_OVERHEAD) * nominal
        lead = SEND_OVERHEAD * nominal
        best = None
        src_slots = self.cslots[src]
        dst_slots = self.cslots[dst]
        if not src_slots or not dst_slots:
            raise SchedulingError(
                f"transfer {key} {src}->{dst}: missing communicator "
                f"processes ({len(src_slots)} sender, {len(dst_slots)} "
                "receiver)")
        ends = trial.ends
        for cs in src_slots:
            le_s = ends[cs] if cs in ends else self.comm_end[cs]
            for cr in dst_slots:
                le_r = ends[cr] if cr in ends else self.comm_end[cr]
                t0 = max(ready, le_s, le_r - lead)
                finish = t0 + send_span
                if best is None or finish < best[0] - 1e-15:
                    best = (finish, cs, cr, t0)
        _, cs, cr, t0 = best
        xfer = _Xfer(tile=key, src=src, dst=dst, send_slot=cs, recv_slot=cr,
                     t0=t0, nominal=nominal, nbytes=nbytes,
                     for_task=for_task, dep=self.producer.get(key, ""))
        ends[cs] = t0 + send_span
        ends[cr] = t0 + send_span
        return xfer

    def _xfer_id(self) -> int:
        self._seq += 1
        return self._seq

    def ensure_tile(self, key: str, node: str, trial: _Trial,
                    consumer: str) -> tuple[float, str, list[_Xfer],
                                            list[_Merge]]:
        """Time + dependency that makes ``key`` readable on ``node``.

        Returns (available_time, dep_task_id, transfers, merges); the
        bookings are tentative until the owning plan commits.
        """
        home = self.home.get(key)
        if home == node:
            return self.ready[key], self.producer[key], [], []
        if home is None:
            raise SchedulingError(f"tile {key} read before being produced")
        if self.opts.cache:
            win = self._open_window(node, key)
            if win is not None:
                return win.place, win.provider, [], []

        direct = self._plan_direct(key, home, node, trial, consumer)
        if key in self.tdag.split and home == self.master:
            sub = self._plan_subpath(key, node, trial.copy(), consumer)
            if sub is not None and sub[0] <= direct[0] + 1e-15:
                trial.adopt(sub[4])
                return sub[:4]
        trial.adopt(direct[4])
        return direct[:4]

    def _plan_direct(self, key, src, dst, trial, consumer):
        scratch = trial.copy()
        xfer = self._plan_xfer(key, src, dst, scratch, consumer
                               if not self.opts.cache else "")
        return xfer.finish, "", [xfer], [], scratch

    def _plan_subpath(self, key, dst, scratch, consumer):
        if not self.wslots[dst]:
            return None
        subs = self.tdag.split[key]
        xfers = [self._plan_xfer(s, self.master, dst, scratch, "::merge")
                 for s in subs]
        data_ready = max(x.finish for x in xfers)
        parent = self.tdag.tiles[key]
        dur = self._duration(dst, "merge", (parent.rows, parent.cols, 0))
        best = None
        for slot in self.wslots[dst]:
            g = _find_gap(self.timelines[slot], scratch.ivals.get(slot, []),
                          data_ready, dur)
            if best is None or g + dur < best[0] - 1e-15:
                best = (g + dur, slot, g)
        _, slot, g = best
        scratch.ivals.setdefault(slot, [])
        insort(scratch.ivals[slot], (g, g + dur))
        merge = _Merge(tile=key, node=dst, slot=slot, start=g, dur=dur,
                       xfers=xfers)
        return merge.finish, "", [], [merge], scratch

    # -- planning and committing one task --

    def plan_task(self, task: tiling.TiledTask, node: str) -> _Plan:
        plan = _Plan(node=node)
        trial = _Trial()
        deps: list[str] = []
        data_ready = 0.0
        pins: list[tuple[str, str]] = []
        ensured: dict[str, float] = {}
        for key in task.reads:
            if key in ensured:
                data_ready = max(data_ready, ensured[key])
                continue
            avail, dep, xfers, merges = self.ensure_tile(
                key, node, trial, task.id)
            plan.xfers.extend(xfers)
            plan.merges.extend(merges)
            if dep and not xfers and not merges:
                deps.append(dep)
            if not xfers and not merges and self.home.get(key) != node:
                pins.append((node, key))
            ensured[key] = avail
            data_ready = max(data_ready, avail)
        if task.out and task.out in self.last_writer:
            prev = self.last_writer[task.out]
            deps.append(prev)
            data_ready = max(data_ready, self._finish_of[prev])

        dur = self._duration(node, task.kind, task.dims)
        best = None
        for slot in self.wslots[node]:
            g = _find_gap(self.timelines[slot], trial.ivals.get(slot, []),
                          data_ready, dur)
            if best is None or g < best[0] - 1e-15:
                best = (g, slot)
        if best is None:
            raise SchedulingError(f"node {node} has no worker processes")
        plan.start, plan.slot = best
        plan.finish = plan.start + dur
        plan.deps = tuple(deps)
        plan.window_pins = pins
        return plan

    def commit(self, task: tiling.TiledTask, plan: _Plan) -> None:
        # Pin reused windows first: transfer placements below run capacity
        # checks that must not evict copies this very plan depends on.  A
        # longer pin defers the copy's entry into the accounted cache set,
        # so the check is revisited at the new expiry instant.
        for node, key in plan.window_pins:
            win = self._open_window(node, key)
            if win is not None:
                win.readers.append(task.id)
                if plan.finish > win.pin:
                    win.pin = plan.finish
                    self._register_pin(node, plan.finish)

        deps = list(plan.deps)
        xfer_recv: dict[tuple[str, str], str] = {}
        for x in plan.xfers:
            rid = self._commit_xfer(x, pin_until=plan.finish,
                                    reader=task.id)
            xfer_recv[(x.tile, x.dst)] = rid
        merge_ids: dict[str, str] = {}
        for m in plan.merges:
            mid = self._commit_merge(m, task, pin_until=plan.finish)
            merge_ids[m.tile] = mid
        for key in task.reads:
            if key in merge_ids:
                deps.append(merge_ids[key])
            elif (key, plan.node) in xfer_recv:
                deps.append(xfer_recv[(key, plan.node)])

        st = ScheduledTask(
            id=task.id, kind=sched_kind(task.kind), process=plan.slot,
            start=plan.start, finish=plan.finish, op=task.kind,
            out=task.out, reads=task.reads, dims=task.dims,
            scalar=task.scalar, deps=tuple(sorted(set(deps))))
        self._append(st)
        self.timelines[plan.slot].insert(plan.start, plan.finish)

        if task.out:
            self.home[task.out] = plan.node
            self.ready[task.out] = plan.finish
            self.producer[task.out] = task.id
            self.last_writer[task.out] = task.id
            self._finish_of[task.id] = plan.finish
        else:
            self._finish_of[task.id] = plan.finish

    def _append(self, st: ScheduledTask) -> None:
        self.out.append(st)
        self._finish_of[st.id] = st.finish

    def _commit_xfer(self, x: _Xfer, pin_until: float = 0.0,
                     reader: str = "") -> str:
        seq = self._xfer_id()
        pair = f"x{seq}"
        sid, rid = f"sx{seq}", f"rx{seq}"
        send = ScheduledTask(
            id=sid, kind="send", process=x.send_slot, start=x.t0,
            finish=x.finish, deps=(x.dep,) if x.dep else (),
            peer=x.recv_slot, pair=pair, tile=x.tile, nbytes=x.nbytes,
            for_task=x.for_task)
        recv = ScheduledTask(
            id=rid, kind="recv", process=x.recv_slot, start=x.recv_start,
            finish=x.finish, deps=(sid,), peer=x.send_slot, pair=pair,
            tile=x.tile, nbytes=x.nbytes, for_task=x.for_task)
        self._append(send)
        self._append(recv)
        self.comm_end[x.send_slot] = max(self.comm_end[x.send_slot],
                                         x.finish)
        self.comm_end[x.recv_slot] = max(self.comm_end[x.recv_slot],
                                         x.finish)
        if self.opts.cache and not x.for_task:
            self._place(x.dst, x.tile, x.finish, rid, x.nbytes, x.recv_slot,
                        pin_until, reader)
        return rid

    def _commit_merge(self, m: _Merge, consumer: tiling.TiledTask,
                      pin_until: float = 0.0) -> str:
        n = self._mgseq.get((m.tile, m.node), 0)
        self._mgseq[(m.tile, m.node)] = n + 1
        mid = f"mg:{m.tile}@{m.node}" + (f"#{n}" if n else "")
        recv_ids = tuple(sorted(
            self._commit_xfer(replace(x, for_task=mid)) for x in m.xfers))
        parent = self.tdag.tiles[m.tile]
        st = ScheduledTask(
            id=mid, kind="merge", process=m.slot, start=m.start,
            finish=m.finish, op="merge", out=m.tile,
            reads=self.tdag.split[m.tile],
            dims=(parent.rows, parent.cols, 0), deps=recv_ids,
            for_task="" if self.opts.cache else consumer.id)
        self._append(st)
        self.timelines[m.slot].insert(m.start, m.finish)
        if self.opts.cache:
            self._place(m.node, m.tile, m.finish, mid, parent.nbytes, m.slot,
                        pin_until, consumer.id)
        return mid

    def _place(self, node: str, key: str, when: float, provider: str,
               nbytes: int, slot: str, pin_until: float = 0.0,
               reader: str = "") -> None:
        if key in self.open_wins[node]:
            raise IntegrityError(f"{node}: tile {key} placed while already "
                                 "cached")
        win = _Window(when, provider, nbytes)
        win.pin = max(win.pin, pin_until)
        if reader:
            win.readers.append(reader)
        self.open_wins[node][key] = win
        self.win_log[node].append((key, win))
        self.cache_trace[node].append(
            {"time": when, "action": "place", "key": key, "bytes": nbytes})
        self._append(ScheduledTask(
            id=f"cp:{provider}", kind="cache_place", process=slot,
            start=when, finish=when, tile=key, nbytes=nbytes,
            deps=(provider,)))
        # Occupancy only grows at pin-expiry instants, and bookings may
        # land earlier in time than already-committed events, so capacity
        # is re-verified at every known pin instant from this window's pin
        # onward.  Evictions flip window state; commands are emitted later.
        self._register_pin(node, win.pin)

    def _register_pin(self, node: str, pin: float) -> None:
        instants = self.pin_instants[node]
        i = bisect_right(instants, pin)
        if i == 0 or instants[i - 1] != pin:
            instants.insert(i, pin)
            i += 1
        for at in instants[i - 1:]:
            self._evict_to_capacity(node, at)

    def _evict_to_capacity(self, node: str, when: float) -> None:
        """Evict (or advance an eviction) so unpinned bytes fit at ``when``."""
        pos = self._current_pos
        eps = 1e-15
        opens = self.open_wins[node]
        closed = self.closed_wins[node]
        while True:
            occupied = 0
            candidates = []
            for key, w in opens.items():
                if w.place <= when + eps and w.pin <= when:
                    occupied += w.nbytes
                    candidates.append((key, w))
            idx = bisect_right(closed, (when + eps, 1 << 62))
            for entry in closed[idx:]:
                ev_t, _, key, w = entry
                if w.evict != ev_t:
                    continue  # superseded by an advanced eviction
                if w.place <= when + eps and w.pin <= when:
                    occupied += w.nbytes
                    candidates.append((key, w))
            if occupied <= self.capacity or not candidates:
                return
            key, w = max(candidates,
                         key=lambda kw: (self._next_use(kw[0], pos), kw[0]))
            if w.evict is None:
                del opens[key]
            w.evict = when
            insort(closed, (when, self._xfer_id(), key, w))

    def _emit_evictions(self) -> None:
        by_id = {t.id: t for t in self.out}
        for node in self.node_ids:
            for key, w in sorted(self.win_log[node], key=lambda kw: kw[0]):
                if w.evict is None:
                    continue
                self.cache_trace[node].append(
                    {"time": w.evict, "action": "evict", "key": key,
                     "bytes": w.nbytes})
                provider = by_id[w.provider]
                deps = tuple(sorted({w.provider, *w.readers}))
                self._append(ScheduledTask(
                    id=f"ce:{self._xfer_id()}", kind="cache_evict",
                    process=provider.process, start=w.evict,
                    finish=w.evict, tile=key, nbytes=w.nbytes,
                    deps=deps))
            self.cache_trace[node].sort(
                key=lambda e: (e["time"], e["action"] == "place", e["key"]))

    # -- main entry --

    def run(self) -> Schedule:
        tdag, opts = self.tdag, self.opts
        if opts.cache and tdag.tiles:
            biggest = max(t.nbytes for t in tdag.tiles.values())
            if biggest > self.capacity:
                raise SchedulingError(
                    f"cache capacity {self.capacity} B below largest tile "
                    f"({biggest} B)")
        ranks = upward_rank(tdag, self.model, self.cluster)
        indexed = [t for t in tdag.tasks if t.kind != "merge"]
        position = {t.id: i for i, t in enumerate(tdag.tasks)}

        def area(task: tiling.TiledTask) -> int:
            key = task.out or (task.reads[0] if task.reads else "")
            if key and key in tdag.tiles:
                t = tdag.tiles[key]
                return t.rows * t.cols
            return 0

        order = sorted(indexed, key=lambda t: (-ranks[t.id], area(t),
                                               position[t.id]))
        self._finish_of: dict[str, float] = {}
        self._dur_cache: dict[tuple, float] = {}
        for i, task in enumerate(order):
            for key in task.reads:
                self.reader_pos.setdefault(key, []).append(i)

        eps = 1e-15
        for i, task in enumerate(order):
            self._current_pos = i
            if task.kind == "copy_back":
                nodes = [self.master]
            elif task.out and task.out in self.bound:
                nodes = [self.bound[task.out]]
            else:
                nodes = [n for n in self.node_ids if self.wslots[n]]
            if not nodes:
                raise SchedulingError("no node offers worker processes")
            best = None
            for nid in nodes:
                if best is not None:
                    # ties go to the smaller node id, so nodes that cannot
                    # strictly improve are skipped without full planning
                    lb = self._finish_lower_bound(task, nid)
                    if lb > best.finish + eps:
                        continue
                    if lb >= best.finish - eps and nid > best.node:
                        continue
                plan = self.plan_task(task, nid)
                if best is None or plan.finish < best.finish - eps or \
                        (plan.finish <= best.finish + eps
                         and nid < best.node):
                    best = plan
            self.commit(task, best)
            if task.out:
                self.bound.setdefault(task.out, best.node)

        self._emit_evictions()
        makespan = max((t.finish for t in self.out), default=0.0)
        return Schedule(tasks=self.out, makespan=makespan,
                        tile_size=tdag.tile_size,
                        cluster_signature=self.cluster.signature(),
                        cache_capacity=self.capacity, opts=opts,
                        cache_trace=self.cache_trace, tdag=tdag)


def schedule(tdag: tiling.TiledTaskDag, cluster: ClusterSpec,
             model: TimeModel, opts: Optional[ScheduleOpts] = None
             ) -> Schedule:
    """Produce a full per-process schedule for one tiled DAG.

    With dynamic tiling enabled this runs twice: a first pass finds the
    operand transfers that gate the startup phase, those input tiles are
    split into sub-tiles, and the split DAG is scheduled for real.
    """
    opts = opts or ScheduleOpts()
    cluster.validate()
    if not opts.dynamic_tiling or len(cluster.nodes) < 2:
        return _Builder(tdag, cluster, model, opts).run()

    probe_opts = replace(opts, dynamic_tiling=False)
    first = _Builder(tdag, cluster, model, probe_opts).run()
    startup_end = first.predicted_startup()
    hints = sorted({
        t.tile for t in first.tasks
        if t.kind == "send" and t.node == cluster.master
        and t.start < startup_end and t.tile in tdag.input_tiles
        and tdag.tiles[t.tile].level == 0})
    if not hints:
        first.opts = opts
        return first
    split = tiling.merge_subtiles(
        tiling.dynamic_split(tdag, hints, opts.split_factor))
    final = _Builder(split, cluster, model, probe_opts).run()
    final.opts = opts
    return final


def predicted_makespan(sched: Schedule) -> float:
    return sched.makespan


# --- schedule validation ---------------------------------------------------------

def validate_schedule(sched: Schedule, cluster: Optional[ClusterSpec] = None
                      ) -> None:
    """Check every structural invariant; raises IntegrityError on failure."""
    tasks = sched.task_map()
    if len(tasks) != len(sched.tasks):
        raise IntegrityError("duplicate task ids in schedule")
    eps = 1e-9
    for t in sched.tasks:
        if t.finish < t.start - eps:
            raise IntegrityError(f"{t.id}: finish before start")
        for d in t.deps:
            if d not in tasks:
                raise IntegrityError(f"{t.id}: unknown dependency {d}")
            if t.kind == "recv" and tasks[d].kind == "send" \
                    and tasks[d].pair == t.pair:
                continue  # a recv overlaps its own send by design
            if tasks[d].finish > t.start + eps:
                raise IntegrityError(
                    f"{t.id} starts at {t.start} before dependency {d} "
                    f"finishes at {tasks[d].finish}")

    by_proc: dict[str, list[ScheduledTask]] = {}
    for t in sched.tasks:
        by_proc.setdefault(t.process, []).append(t)
    for proc, items in by_proc.items():
        if cluster is not None:
            node, slot = proc.split(":", 1)
            spec = cluster.node(node)
            idx = int(slot[1:])
            limit = spec.worker_procs if slot[0] == "w" else spec.comm_procs
            if idx >= limit:
                raise IntegrityError(f"process {proc} outside cluster spec")
        items.sort(key=lambda t: (t.start, t.finish))
        prev = None
        for t in items:
            if t.start >= t.finish:
                continue  # zero-length commands never occupy the slot
            if prev is not None and t.start < prev.finish - eps:
                raise IntegrityError(
                    f"{proc}: {t.id} overlaps {prev.id}")
            prev = t

    sends = {t.pair: t for t in sched.tasks if t.kind == "send"}
    recvs = {t.pair: t for t in sched.tasks if t.kind == "recv"}
    if set(sends) != set(recvs):
        raise IntegrityError("unpaired send/recv tasks")
    for pair, send in sends.items():
        recv = recvs[pair]
        if recv.finish < send.start - eps:
            raise IntegrityError(f"transfer {pair}: recv ends before send "
                                 "starts")
        if send.peer != recv.process or recv.peer != send.process:
            raise IntegrityError(f"transfer {pair}: peer mismatch")
        if send.nbytes != recv.nbytes or send.tile != recv.tile:
            raise IntegrityError(f"transfer {pair}: payload mismatch")

    for t in sched.tasks:
        if t.kind == "merge":
            for d in t.deps:
                dep = tasks[d]
                if dep.kind == "recv" and dep.node != t.node:
                    raise IntegrityError(
                        f"merge {t.id} on {t.node} gathers {dep.tile} "
                        f"on {dep.node}")

    _replay_cache_capacity(sched)

    real_max = max((t.finish for t in sched.tasks), default=0.0)
    if abs(real_max - sched.makespan) > eps:
        raise IntegrityError(f"makespan {sched.makespan} != max finish "
                             f"{real_max}")


def _replay_cache_capacity(sched: Schedule) -> None:
    """Unpinned cached bytes must stay within capacity at all times."""
    pin: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for t in sched.tasks:
        if t.kind in ("compute", "zero", "merge", "copy_back"):
            for key in t.reads:
                pin.setdefault((t.node, key), []).append((t.start, t.finish))

    for node, trace in sched.cache_trace.items():
        events = sorted(trace, key=lambda e: (e["time"],
                                              e["action"] == "place"))
        open_entries: dict[str, int] = {}
        i = 0
        while i < len(events):
            now = events[i]["time"]
            # apply every event at this instant before checking occupancy
            while i < len(events) and events[i]["time"] <= now + 1e-15:
                ev = events[i]
                if ev["action"] == "place":
                    open_entries[ev["key"]] = ev["bytes"]
                else:
                    open_entries.pop(ev["key"], None)
                i += 1
            occupied = 0
            for key, nbytes in open_entries.items():
                # a copy with a reader still ahead of it is working set
                pinned = any(f > now + 1e-12
                             for _, f in pin.get((node, key), ()))
                if not pinned:
                    occupied += nbytes
            if occupied > sched.cache_capacity + 1:
                raise IntegrityError(
                    f"node {node}: cache occupancy {occupied} exceeds "
                    f"capacity {sched.cache_capacity} at t={now}")


# --- candidate sweep --------------------------------------------------------------

def candidate_sweep(tdags: Iterable[tiling.TiledTaskDag],
                    cluster: ClusterSpec, model: TimeModel,
                    worker_range: Optional[Iterable[int]] = None,
                    comm_range: Optional[Iterable[int]] = None,
                    opts: Optional[ScheduleOpts] = None,
                    parallelism: int = 4):
    """Evaluate tile size x master worker/comm counts; best simulated wins.

    Returns (schedule, sim_result, rows) where rows lists every candidate
    with its simulated makespan.
    """
    from . import simulator  # deferred to avoid an import cycle
    from concurrent.futures import ThreadPoolExecutor

    opts = opts or ScheduleOpts()
    master = cluster.node(cluster.master)
    workers = sorted(set(worker_range)) if worker_range else [
        master.worker_procs]
    comms = sorted(set(comm_range)) if comm_range else [master.comm_procs]
    tdags = list(tdags)
    if not tdags or not workers or not comms:
        raise SchedulingError("candidate sweep over empty ranges")

    variants = []
    for tdag in tdags:
        for w in workers:
            for c in comms:
                try:
                    variant = cluster.with_master_config(w, c)
                except Exception:
                    continue
                variants.append((tdag, w, c, variant))
    if not variants:
        raise SchedulingError("all candidate configurations infeasible")

    def evaluate(arg):
        tdag, w, c, variant = arg
        sched = schedule(tdag, variant, model, opts)
        result = simulator.simulate(sched, model, variant)
        return (tdag, w, c, sched, result)

    rows = []
    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        for tdag, w, c, sched, result in pool.map(evaluate, variants):
            tr, tc = tdag.tile_size
            rows.append({"tile": tdag.tile_size, "workers": w, "comms": c,
                         "makespan": result.makespan,
                         "startup": result.startup_duration,
                         "schedule": sched, "sim": result,
                         "sort_key": (result.makespan, tr * tc, c, w)})
    rows.sort(key=lambda r: r["sort_key"])
    best = rows[0]
    return best["schedule"], best["sim"], rows
