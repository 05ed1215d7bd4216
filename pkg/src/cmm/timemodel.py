"""Cost models fitted from profiling samples by ordinary least squares.

Each compute entry is a polynomial over operand dimensions; the basis
depends on the operation family (2 terms for vector elementwise, 4 for
matrix elementwise/scalar/unary families, 8 for matrix multiply).
Communication links are fitted as latency + seconds-per-byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import FitError, PredictionError

FORMAT_PROFILE = "cmm-profile/1"
FORMAT_MODEL = "cmm-timemodel/1"

# Basis terms are evaluated over the canonical dim tuple (m, n, k); the
# transfer basis runs over a byte count instead.
BASES: dict[str, tuple[str, ...]] = {
    "vec_ew": ("1", "n"),
    "svec": ("1", "n", "m", "mn"),
    "unary": ("1", "n", "m", "mn"),
    "scalar": ("1", "n", "m", "mn"),
    "ewise": ("1", "n", "m", "mn"),
    "transpose": ("1", "n", "m", "mn"),
    "zero": ("1", "n", "m", "mn"),
    "alloc": ("1", "n", "m", "mn"),
    "merge": ("1", "n", "m", "mn"),
    "copyback": ("1", "n", "m", "mn"),
    "matmul": ("1", "n", "m", "k", "mn", "mk", "nk", "mnk"),
    "xfer": ("1", "bytes"),
}

_TILE_KIND_TO_OP = {
    "matmul": "matmul", "sadd": "scalar", "ssub": "scalar",
    "smul": "scalar", "sdiv": "scalar", "sin": "unary", "cos": "unary",
    "transpose": "transpose", "zero": "zero", "alloc": "alloc",
    "merge": "merge", "copy_back": "copyback",
}


def op_kind_for(kind: str, dims: tuple[int, int, int]
                ) -> tuple[str, tuple[int, int, int]]:
    """Map a (tiled) task kind + dims onto a model row and canonical dims."""
    m, n, k = dims
    if kind in ("add", "sub", "emul"):
        if m == 1 or n == 1:
            return "vec_ew", (1, m * n, 0)
        return "ewise", (m, n, 0)
    op = _TILE_KIND_TO_OP.get(kind)
    if op is None:
        raise PredictionError(f"no model row for task kind {kind!r}")
    return op, (m, n, k)


def _terms(basis: tuple[str, ...], m: float, n: float, k: float,
           nbytes: float = 0.0) -> list[float]:
    vals = {"1": 1.0, "m": m, "n": n, "k": k, "mn": m * n, "mk": m * k,
            "nk": n * k, "mnk": m * n * k, "bytes": nbytes}
    return [vals[t] for t in basis]


@dataclass(frozen=True)
class ProfileSample:
    entity: str  # node compute class, or link key for op == "xfer"
    op: str
    m: int = 0
    n: int = 0
    k: int = 0
    bytes: int = 0
    seconds: float = 0.0

    def __post_init__(self):
        if self.seconds <= 0:
            raise FitError(f"sample for {self.entity}/{self.op}: duration "
                           f"must be positive, got {self.seconds}")


@dataclass
class TimeModel:
    compute: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)
    comm: dict[str, tuple[float, float]] = field(default_factory=dict)
    fitted_residual: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_coeffs(cls, compute: dict[tuple[str, str], Iterable[float]],
                    comm: dict[str, tuple[float, float]]) -> "TimeModel":
        model = cls()
        for key, coeffs in compute.items():
            vec = np.asarray(list(coeffs), dtype=float)
            basis = BASES[key[1]]
            if vec.shape != (len(basis),):
                raise FitError(f"{key}: expected {len(basis)} coefficients")
            model.compute[key] = vec
        model.comm = {k: (float(a0), float(a1)) for k, (a0, a1) in comm.items()}
        return model

    def predict_compute(self, node_class: str, op_kind: str,
                        dims: tuple[int, int, int]) -> float:
        basis = BASES.get(op_kind)
        if basis is None:
            raise PredictionError(f"unknown op kind {op_kind!r}")
        needed = 3 if op_kind == "matmul" else (1 if op_kind == "vec_ew" else 2)
        if op_kind == "vec_ew":
            checked = (dims[1],)
        else:
            checked = dims[:needed]
        if any(d <= 0 for d in checked):
            raise PredictionError(f"{op_kind}: dims must be positive, "
                                  f"got {dims}")
        coeffs = self.compute.get((node_class, op_kind))
        if coeffs is None:
            raise PredictionError(f"no fitted entry for node class "
                                  f"{node_class!r}, op {op_kind!r}")
        value = float(np.dot(coeffs, _terms(basis, *dims)))
        return max(value, 0.0)

    def predict_task(self, node_class: str, kind: str,
                     dims: tuple[int, int, int]) -> float:
        op, canon = op_kind_for(kind, dims)
        return self.predict_compute(node_class, op, canon)

    def predict_comm(self, link: str, nbytes: int) -> float:
        if nbytes < 0:
            raise PredictionError(f"negative byte count {nbytes}")
        entry = self.comm.get(link)
        if entry is None:
            raise PredictionError(f"no fitted entry for link {link!r}")
        a0, a1 = entry
        return max(a0 + a1 * nbytes, 0.0)

    def covers_classes(self, classes: Iterable[str]) -> bool:
        fitted = {c for c, _ in self.compute}
        return set(classes) <= fitted

    # -- serialization --

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_MODEL,
            "compute": {f"{c}|{op}": list(map(float, v))
                        for (c, op), v in sorted(self.compute.items())},
            "comm": {k: list(v) for k, v in sorted(self.comm.items())},
            "residual": dict(sorted(self.fitted_residual.items())),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TimeModel":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_MODEL:
            raise FitError(f"unexpected model format tag "
                           f"{doc.get('format')!r}")
        model = cls()
        for key, coeffs in doc["compute"].items():
            cls_name, op = key.split("|", 1)
            model.compute[(cls_name, op)] = np.asarray(coeffs, dtype=float)
        model.comm = {k: (float(v[0]), float(v[1]))
                      for k, v in doc["comm"].items()}
        model.fitted_residual = {k: float(v)
                                 for k, v in doc.get("residual", {}).items()}
        return model


def fit(samples: Iterable[ProfileSample]) -> TimeModel:
    """Least-squares fit of every (entity, op) group in the sample set."""
    groups: dict[tuple[str, str], list[ProfileSample]] = {}
    for s in samples:
        groups.setdefault((s.entity, s.op), []).append(s)
    if not groups:
        raise FitError("no samples to fit")

    model = TimeModel()
    for (entity, op), rows in sorted(groups.items()):
        basis = BASES.get(op)
        if basis is None:
            raise FitError(f"{entity}/{op}: unknown op kind")
        if len(rows) < len(basis):
            raise FitError(f"{entity}/{op}: {len(rows)} samples for a "
                           f"{len(basis)}-term basis")
        design = np.array([_terms(basis, s.m, s.n, s.k, s.bytes)
                           for s in rows], dtype=float)
        target = np.array([s.seconds for s in rows], dtype=float)
        if np.linalg.matrix_rank(design) < len(basis):
            raise FitError(f"{entity}/{op}: rank-deficient design matrix")
        coeffs, _, _, _ = np.linalg.lstsq(design, target, rcond=None)
        resid = target - design @ coeffs
        rms = float(np.sqrt(np.mean(resid ** 2)))
        if op == "xfer":
            model.comm[entity] = (float(coeffs[0]), float(coeffs[1]))
            model.fitted_residual[f"{entity}|xfer"] = rms
        else:
            model.compute[(entity, op)] = coeffs
            model.fitted_residual[f"{entity}|{op}"] = rms
    return model


# --- profile log I/O ----------------------------------------------------------

def write_profile_log(path, samples: Iterable[ProfileSample]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": FORMAT_PROFILE}) + "\n")
        for s in samples:
            fh.write(json.dumps({"entity": s.entity, "op": s.op, "m": s.m,
                                 "n": s.n, "k": s.k, "bytes": s.bytes,
                                 "seconds": s.seconds}) + "\n")


def read_profile_log(path) -> list[ProfileSample]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            if "format" in doc and "entity" not in doc:
                if doc["format"] != FORMAT_PROFILE:
                    raise FitError(f"unexpected profile format tag "
                                   f"{doc['format']!r}")
                continue
            out.append(ProfileSample(entity=doc["entity"], op=doc["op"],
                                     m=doc.get("m", 0), n=doc.get("n", 0),
                                     k=doc.get("k", 0),
                                     bytes=doc.get("bytes", 0),
                                     seconds=doc["seconds"]))
    return out
