"""Offline profiling of compute kernels and emulated links.

Runs the same kernels the executor uses, on the same host, and times the
same pacing channels the executor transfers through, so the fitted model
predicts exactly what execution will do.
"""

from __future__ import annotations

import time
from statistics import median
from typing import Iterable, Optional

import numpy as np

from .cluster import ClusterSpec
from .executor import Channel, run_kernel
from .timemodel import ProfileSample

DEFAULT_DIMS = (64, 128, 256, 512)
DEFAULT_MATMUL_DIMS = (64, 128, 256, 384)
DEFAULT_REPS = 5
_MIN_SECONDS = 1e-7  # clock floor so zero-cost kernels stay fittable


def _time_call(fn, reps: int) -> float:
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return max(median(samples), _MIN_SECONDS)


def _compute_sample(op: str, m: int, n: int, k: int, reps: int,
                    rng) -> float:
    if op == "vec_ew":
        a, b = rng.random(n), rng.random(n)
        return _time_call(lambda: a + b, reps)
    if op == "svec":
        a, b = rng.random(m * n), rng.random(n)
        return _time_call(lambda: a.reshape(m, n) * b, reps)
    if op == "ewise":
        a, b = rng.random((m, n)), rng.random((m, n))
        return _time_call(lambda: run_kernel("add", [a, b]), reps)
    if op == "scalar":
        a = rng.random((m, n))
        return _time_call(lambda: run_kernel("smul", [a], scalar=1.5), reps)
    if op == "unary":
        a = rng.random((m, n))
        return _time_call(lambda: run_kernel("sin", [a]), reps)
    if op == "transpose":
        a = rng.random((m, n))
        return _time_call(lambda: run_kernel("transpose", [a]), reps)
    if op == "zero":
        a = np.empty((m, n))
        return _time_call(lambda: a.fill(0.0), reps)
    if op == "alloc":
        return _time_call(lambda: np.empty((m, n)), reps)
    if op in ("merge", "copyback"):
        a = rng.random((m, n))
        out = np.empty((2 * m, 2 * n)) if op == "merge" else np.empty((m, n))
        def assemble():
            if op == "merge":
                out[:m, :n] = a
                out[m:, n:] = a
            else:
                out[:, :] = a
        return _time_call(assemble, reps)
    if op == "matmul":
        a, b = rng.random((m, n)), rng.random((n, k))
        c = np.zeros((m, k))
        def call():
            c.fill(0.0)
            run_kernel("matmul", [a, b], out=c)
        return _time_call(call, reps)
    raise ValueError(f"unknown profiled op {op!r}")


def profile_compute(compute_class: str, dims: Iterable[int] = DEFAULT_DIMS,
                    matmul_dims: Iterable[int] = DEFAULT_MATMUL_DIMS,
                    reps: int = DEFAULT_REPS, scale: float = 1.0,
                    seed: int = 0) -> list[ProfileSample]:
    rng = np.random.default_rng(seed)
    dims = sorted(set(dims))
    matmul_dims = sorted(set(matmul_dims))
    samples = []
    for n in dims:
        seconds = _compute_sample("vec_ew", 1, n, 0, reps, rng) * scale
        samples.append(ProfileSample(compute_class, "vec_ew", m=1, n=n,
                                     seconds=seconds))
    for op in ("svec", "ewise", "scalar", "unary", "transpose", "zero",
               "alloc", "merge", "copyback"):
        for m in dims:
            for n in dims:
                seconds = _compute_sample(op, m, n, 0, reps, rng) * scale
                samples.append(ProfileSample(compute_class, op, m=m, n=n,
                                             seconds=seconds))
    for m in matmul_dims:
        for n in matmul_dims:
            for k in matmul_dims:
                seconds = _compute_sample("matmul", m, n, k, reps,
                                          rng) * scale
                samples.append(ProfileSample(compute_class, "matmul", m=m,
                                             n=n, k=k, seconds=seconds))
    return samples


def probe_sizes(effective_rate: float) -> list[int]:
    """Transfer sizes giving ~2..40 ms probes plus a latency anchor."""
    base = [4096]
    base += [max(8192, int(effective_rate * f))
             for f in (0.002, 0.005, 0.01, 0.02, 0.04)]
    return sorted(set(base))


def profile_links(cluster: ClusterSpec, reps: int = 3,
                  sizes: Optional[Iterable[int]] = None
                  ) -> list[ProfileSample]:
    """Time real pacing transfers once per distinct link physics."""
    cache: dict[float, list[tuple[int, float]]] = {}
    samples = []
    for link in cluster.links:
        if link.bytes_per_s not in cache:
            channel = Channel(link.bytes_per_s, cluster.comm_proc_rate)
            rate = min(link.bytes_per_s, cluster.comm_proc_rate)
            use = list(sizes) if sizes else probe_sizes(rate)
            measured = []
            for nbytes in use:
                secs = _time_call(lambda: channel.transfer(nbytes), reps)
                measured.append((nbytes, secs))
            cache[link.bytes_per_s] = measured
        for nbytes, secs in cache[link.bytes_per_s]:
            samples.append(ProfileSample(link.model_key, "xfer",
                                         bytes=nbytes, seconds=secs))
    return samples


def profile_cluster(cluster: ClusterSpec, dims: Iterable[int] = DEFAULT_DIMS,
                    matmul_dims: Iterable[int] = DEFAULT_MATMUL_DIMS,
                    reps: int = DEFAULT_REPS, seed: int = 0
                    ) -> list[ProfileSample]:
    """Full profile: one kernel grid per compute class plus every link."""
    samples = []
    for cls in cluster.classes():
        scale = cluster.class_scales.get(cls, 1.0)
        samples.extend(profile_compute(cls, dims, matmul_dims, reps,
                                       scale, seed))
    samples.extend(profile_links(cluster, reps=max(2, reps - 2)))
    return samples
