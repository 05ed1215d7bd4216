"""Shared builders: synthetic clusters and fully-covered time models."""

import json

import pytest

from cmm.cluster import ClusterSpec, load_cluster
from cmm.timemodel import BASES, TimeModel


def make_cluster(n_nodes=2, workers=2, comms=2, gbps=100.0, comm_gbps=50.0,
                 cores=48, blas=4, classes=None, master_cores=None,
                 scales=None) -> ClusterSpec:
    """Uniform-bandwidth cluster with node n0 as master."""
    nodes = []
    for i in range(n_nodes):
        nodes.append({
            "id": f"n{i}",
            "cores": master_cores if i == 0 and master_cores else cores,
            "bandwidth_gbps": gbps if not isinstance(gbps, (list, tuple))
            else gbps[i],
            "class": classes[i] if classes else "default",
            "workers": workers, "comms": comms,
            **({"master": True} if i == 0 else {}),
        })
    doc = {"blas_threads": blas, "comm_proc_gbps": comm_gbps, "nodes": nodes}
    if scales:
        doc["class_scales"] = scales
    return load_cluster(json.dumps(doc))


def synth_model(cluster: ClusterSpec, matmul_scale=1.0, comm_latency=1e-5,
                class_speeds=None) -> TimeModel:
    """Deterministic model covering every op kind and every link.

    Compute coefficients are small positive constants (ranks then strictly
    decrease along DAG edges); link seconds-per-byte matches the emulated
    per-communicator rate so scheduler, simulator and executor agree.
    """
    compute = {}
    for cls in cluster.classes():
        f = (class_speeds or {}).get(cls, 1.0)
        for op in BASES:
            if op == "xfer":
                continue
            if op == "matmul":
                compute[(cls, op)] = [2e-6, 1e-9, 1e-9, 1e-9, 1e-10,
                                      1e-10, 1e-10, f * matmul_scale * 2e-9]
            elif op == "vec_ew":
                compute[(cls, op)] = [1e-6, f * 1e-9]
            else:
                compute[(cls, op)] = [1e-6, 1e-9, 1e-9, f * 5e-10]
    comm = {}
    for link in cluster.links:
        rate = min(cluster.comm_proc_rate, link.bytes_per_s)
        comm[link.model_key] = (comm_latency, 1.0 / rate)
    return TimeModel.from_coeffs(compute, comm)


@pytest.fixture
def two_node_cluster():
    return make_cluster(2)


@pytest.fixture
def two_node_model(two_node_cluster):
    return synth_model(two_node_cluster)
