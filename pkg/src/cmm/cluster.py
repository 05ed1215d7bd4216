"""Cluster inventory, node ranking and communicator auto-configuration.

The emulated network has two physical parameters per directed link: the
link bandwidth and a per-communicator sustained rate (one communicator
process cannot saturate a fast link by itself).  Aggregate throughput
with k communicators is min(k * rate, bandwidth), which yields the
saturation search its stopping point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import ConfigurationError
from .timemodel import TimeModel

GBIT = 1e9  # bits per second
# Default sustained rate of one communicator process: 1/14 of a 10 Gbit/s
# link, so saturation lands at 14 communicators on such a link.
DEFAULT_COMM_PROC_GBPS = 10.0 / 14.0
SATURATION_GAIN = 0.03  # relative throughput gain below which we stop
STRENGTH_PROBE_DIM = 512  # matmul probe size for compute-strength ranking


@dataclass(frozen=True)
class NodeSpec:
    id: str
    cores: int
    worker_procs: int
    worker_threads_each: int
    comm_procs: int
    is_master: bool = False
    compute_class: str = "default"

    def validate(self) -> None:
        used = self.worker_procs * self.worker_threads_each + self.comm_procs
        if used > self.cores:
            raise ConfigurationError(
                f"node {self.id}: {self.worker_procs} workers x "
                f"{self.worker_threads_each} threads + {self.comm_procs} "
                f"communicators exceeds {self.cores} cores")
        if self.worker_procs < 0 or self.comm_procs < 0:
            raise ConfigurationError(f"node {self.id}: negative process count")


@dataclass(frozen=True)
class LinkSpec:
    src: str
    dst: str
    bandwidth: float  # bits per second
    model_key: str

    @property
    def bytes_per_s(self) -> float:
        return self.bandwidth / 8.0


@dataclass
class ClusterSpec:
    nodes: list[NodeSpec]
    links: list[LinkSpec]
    master: str
    blas_threads: int = 4
    comm_proc_rate: float = DEFAULT_COMM_PROC_GBPS * GBIT / 8.0  # bytes/s
    class_scales: dict[str, float] = field(default_factory=dict)  # emulated slowdown

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate node ids")
        masters = [n.id for n in self.nodes if n.is_master]
        if masters != [self.master] or ids.count(self.master) != 1:
            raise ConfigurationError("exactly one master node is required")
        for n in self.nodes:
            n.validate()
        have = {(l.src, l.dst) for l in self.links}
        for n in self.nodes:
            if n.id == self.master:
                continue
            if (self.master, n.id) not in have or (n.id, self.master) not in have:
                raise ConfigurationError(
                    f"missing master<->{n.id} link direction")
        for l in self.links:
            if l.bandwidth <= 0:
                raise ConfigurationError(f"link {l.model_key}: bandwidth must "
                                         "be positive")

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ConfigurationError(f"unknown node {node_id!r}")

    def link(self, src: str, dst: str) -> LinkSpec:
        for l in self.links:
            if l.src == src and l.dst == dst:
                return l
        raise ConfigurationError(f"no link {src}->{dst}")

    def worker_ids(self) -> list[str]:
        return [n.id for n in self.nodes if n.id != self.master]

    def max_inbound_bandwidth(self, node_id: str) -> float:
        inbound = [l.bandwidth for l in self.links if l.dst == node_id]
        return max(inbound) if inbound else 0.0

    def classes(self) -> list[str]:
        return sorted({n.compute_class for n in self.nodes})

    def with_node(self, node_id: str, **changes) -> "ClusterSpec":
        nodes = [replace(n, **changes) if n.id == node_id else n
                 for n in self.nodes]
        return replace_cluster(self, nodes=nodes)

    def with_master_config(self, worker_procs: Optional[int] = None,
                           comm_procs: Optional[int] = None) -> "ClusterSpec":
        changes = {}
        if worker_procs is not None:
            changes["worker_procs"] = worker_procs
        if comm_procs is not None:
            changes["comm_procs"] = comm_procs
        out = self.with_node(self.master, **changes)
        out.node(self.master).validate()
        return out

    def signature(self) -> str:
        parts = [f"{n.id}:{n.cores}:{n.worker_procs}:{n.worker_threads_each}"
                 f":{n.comm_procs}:{n.compute_class}" for n in self.nodes]
        parts += [f"{l.src}>{l.dst}:{l.bandwidth:.0f}" for l in self.links]
        parts.append(f"master={self.master};rate={self.comm_proc_rate:.3f}")
        parts += [f"{c}*{s}" for c, s in sorted(self.class_scales.items())]
        return "|".join(parts)


def replace_cluster(cluster: ClusterSpec, **changes) -> ClusterSpec:
    return ClusterSpec(
        nodes=changes.get("nodes", cluster.nodes),
        links=changes.get("links", cluster.links),
        master=changes.get("master", cluster.master),
        blas_threads=changes.get("blas_threads", cluster.blas_threads),
        comm_proc_rate=changes.get("comm_proc_rate", cluster.comm_proc_rate),
        class_scales=changes.get("class_scales", cluster.class_scales),
    )


def transfer_rate(per_comm_rate: float, bandwidth_bytes: float,
                  active: int) -> float:
    """Per-transfer rate: communicator cap, then equal link share."""
    return min(per_comm_rate, bandwidth_bytes / max(active, 1))


# --- cluster file ------------------------------------------------------------
#
#   {"blas_threads": 4, "comm_proc_gbps": 0.714,
#    "nodes": [{"id": "n0", "cores": 48, "bandwidth_gbps": 10,
#               "class": "big", "master": true,
#               "workers": 2, "comms": 4}, ...]}
#
# "workers"/"comms" are optional manual overrides; auto_configure fills
# them otherwise.

def link_key(src: str, dst: str) -> str:
    return f"{src}->{dst}"


def load_cluster(text: str) -> ClusterSpec:
    doc = json.loads(text)
    blas = int(doc.get("blas_threads", 4))
    rate = float(doc.get("comm_proc_gbps", DEFAULT_COMM_PROC_GBPS)) * GBIT / 8.0
    raw_nodes = doc.get("nodes", [])
    if not raw_nodes:
        raise ConfigurationError("cluster file lists no nodes")
    masters = [n["id"] for n in raw_nodes if n.get("master")]
    if len(masters) != 1:
        raise ConfigurationError("cluster file must mark exactly one master")

    nodes = []
    bw = {}
    for raw in raw_nodes:
        cores = int(raw["cores"])
        comms = int(raw.get("comms", 2))
        default_workers = max(1, (cores - comms) // blas)
        workers = int(raw.get("workers", default_workers))
        node = NodeSpec(id=raw["id"], cores=cores, worker_procs=workers,
                        worker_threads_each=blas, comm_procs=comms,
                        is_master=raw["id"] == masters[0],
                        compute_class=raw.get("class", "default"))
        node.validate()
        nodes.append(node)
        bw[node.id] = float(raw["bandwidth_gbps"]) * GBIT

    links = [LinkSpec(a.id, b.id, min(bw[a.id], bw[b.id]),
                      link_key(a.id, b.id))
             for a in nodes for b in nodes if a.id != b.id]
    scales = {c: float(s) for c, s in doc.get("class_scales", {}).items()}
    cluster = ClusterSpec(nodes=nodes, links=links, master=masters[0],
                          blas_threads=blas, comm_proc_rate=rate,
                          class_scales=scales)
    cluster.validate()
    return cluster


def dump_cluster(cluster: ClusterSpec) -> str:
    doc = {
        "blas_threads": cluster.blas_threads,
        "comm_proc_gbps": cluster.comm_proc_rate * 8.0 / GBIT,
        **({"class_scales": cluster.class_scales}
           if cluster.class_scales else {}),
        "nodes": [{
            "id": n.id, "cores": n.cores,
            "bandwidth_gbps": cluster.max_inbound_bandwidth(n.id) / GBIT,
            "class": n.compute_class, "workers": n.worker_procs,
            "comms": n.comm_procs,
            **({"master": True} if n.is_master else {}),
        } for n in cluster.nodes],
    }
    return json.dumps(doc, indent=2, sort_keys=True)


# --- ranking and auto-configuration -------------------------------------------

def compute_strength(model: TimeModel, node: NodeSpec) -> float:
    """Probe matmul time at a fixed size; lower is stronger."""
    d = STRENGTH_PROBE_DIM
    return model.predict_compute(node.compute_class, "matmul", (d, d, d))


def rank_nodes(cluster: ClusterSpec, model: TimeModel) -> list[NodeSpec]:
    """Decreasing strength: bandwidth first, then compute, then id."""
    return sorted(
        cluster.nodes,
        key=lambda n: (-cluster.max_inbound_bandwidth(n.id),
                       compute_strength(model, n), n.id))


def aggregate_throughput(cluster: ClusterSpec, comm_procs: int,
                         bandwidth_bytes: Optional[float] = None) -> float:
    """Empty-message microbenchmark on the throttle model.

    Each of the k communicators drives one flow; flows share the link
    evenly, each additionally capped by the per-communicator rate.
    """
    if bandwidth_bytes is None:
        bandwidth_bytes = cluster.max_inbound_bandwidth(cluster.master) / 8.0
    rate = transfer_rate(cluster.comm_proc_rate, bandwidth_bytes, comm_procs)
    return comm_procs * rate


def detect_saturation(cluster: ClusterSpec, model: TimeModel,
                      comm_procs: int) -> bool:
    """True when adding the comm_procs-th communicator gained < 3%."""
    if comm_procs <= 1:
        return False
    now = aggregate_throughput(cluster, comm_procs)
    before = aggregate_throughput(cluster, comm_procs - 1)
    return now < before * (1.0 + SATURATION_GAIN)


def saturation_point(cluster: ClusterSpec, model: TimeModel,
                     limit: int) -> int:
    k = 1
    while k < limit and not detect_saturation(cluster, model, k + 1):
        k += 1
    return k


def auto_configure(cluster: ClusterSpec, model: TimeModel,
                   blas_threads: Optional[int] = None) -> ClusterSpec:
    """Pick the master, its communicator count, and worker processes.

    The strongest node becomes master; its communicators grow until the
    empty-message benchmark saturates or cores run out (two master worker
    processes are reserved first); leftover cores become workers.
    """
    if len(cluster.nodes) < 2:
        raise ConfigurationError("auto-configuration needs at least two "
                                 "nodes (no links to configure)")
    blas = blas_threads or cluster.blas_threads
    ranked = rank_nodes(cluster, model)
    master = ranked[0]

    nodes = [replace(n, is_master=n.id == master.id) for n in cluster.nodes]
    cluster = replace_cluster(cluster, nodes=nodes, master=master.id,
                              blas_threads=blas)

    cores = master.cores
    reserved_workers = min(2, cores // blas)
    if reserved_workers == 0:
        raise ConfigurationError(f"master {master.id}: {cores} cores cannot "
                                 f"host a {blas}-thread worker")
    budget = cores - reserved_workers * blas
    if budget < 1:
        raise ConfigurationError(f"master {master.id}: no cores left for "
                                 "communicators")
    comm = min(saturation_point(cluster, model, budget), budget)
    extra_workers = (cores - reserved_workers * blas - comm) // blas
    cluster = cluster.with_node(master.id,
                                worker_procs=reserved_workers + extra_workers,
                                worker_threads_each=blas,
                                comm_procs=comm, is_master=True)

    for wid in cluster.worker_ids():
        w = cluster.node(wid)
        comms = min(2, max(1, w.cores - blas))
        threads = min(blas, w.cores - comms)
        if threads < 1:
            raise ConfigurationError(f"node {wid}: {w.cores} cores cannot "
                                     "host a worker process")
        workers = max(1, (w.cores - comms) // threads)
        cluster = cluster.with_node(wid, worker_procs=workers,
                                    comm_procs=comms,
                                    worker_threads_each=threads)
    cluster.validate()
    return cluster
