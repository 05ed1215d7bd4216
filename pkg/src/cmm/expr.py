"""Lazy capture of matrix programs as expression DAGs.

Operations are recorded instead of evaluated; a ``force`` call (or the
session trace growing past its threshold) hands the captured DAG to the
rewrite stage.  No floating-point work happens at record time.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

from .errors import ProgramError, ShapeError

# Operator inventory accepted at record time.  Binary elementwise ops,
# matrix multiply, scalar broadcast ops, two unary kernels and transpose.
BINARY_OPS = ("add", "sub", "mul", "emul")
SCALAR_OPS = ("sadd", "ssub", "smul", "sdiv")
UNARY_OPS = ("sin", "cos")
ALL_OPS = BINARY_OPS + SCALAR_OPS + UNARY_OPS + ("transpose", "input")

DEFAULT_TRACE_THRESHOLD = 1024

_ids = itertools.count()


def _fresh_id(prefix: str) -> str:
    return f"{prefix}{next(_ids)}"


@dataclass(frozen=True)
class MatrixRef:
    """Handle for a user-visible matrix (an input or a forced result)."""

    id: str
    rows: int
    cols: int
    origin: str = "input"  # "input" | "computed"
    seed: int = 0
    dist: str = "uniform"  # "uniform" | "stochastic"

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"matrix {self.id}: dims must be >= 1, got "
                             f"{self.rows}x{self.cols}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True)
class ExprNode:
    """Immutable node of a captured expression DAG.

    ``op`` is "input" for leaves (then ``ref`` holds the MatrixRef), one of
    the binary/scalar/unary kinds otherwise.  Nodes are shared, never
    mutated, so subtree identity is pointer identity.
    """

    id: str
    op: str
    shape: tuple[int, int]
    children: tuple["ExprNode", ...] = ()
    ref: Optional[MatrixRef] = None
    scalar: Optional[float] = None

    def __hash__(self):
        return hash(self.id)

    def __eq__(self, other):
        return self is other


def input_node(ref: MatrixRef) -> ExprNode:
    return ExprNode(id=_fresh_id("n"), op="input", shape=ref.shape, ref=ref)


def _result_shape(op: str, shapes: Sequence[tuple[int, int]],
                  names: Sequence[str]) -> tuple[int, int]:
    if op == "mul":
        (m, n), (n2, k) = shapes
        if n != n2:
            raise ShapeError(f"mul: inner dims differ, {names[0]} is {m}x{n} "
                             f"but {names[1]} is {n2}x{k}")
        return (m, k)
    if op in ("add", "sub", "emul"):
        if shapes[0] != shapes[1]:
            raise ShapeError(f"{op}: shapes differ, {names[0]} is "
                             f"{shapes[0][0]}x{shapes[0][1]} but {names[1]} "
                             f"is {shapes[1][0]}x{shapes[1][1]}")
        return shapes[0]
    if op == "transpose":
        m, n = shapes[0]
        return (n, m)
    # scalar and unary ops preserve shape
    return shapes[0]


class Session:
    """One logical thread of capture.

    Holds the live roots of the trace and auto-forces through the
    registered materializer once the node count exceeds the threshold.
    """

    def __init__(self, threshold: int = DEFAULT_TRACE_THRESHOLD,
                 materializer: Optional[Callable[[ExprNode], MatrixRef]] = None):
        self.threshold = threshold
        self.materializer = materializer
        self.trace: list[ExprNode] = []
        self._nodes: dict[str, ExprNode] = {}
        self.autoforce_count = 0

    @property
    def node_count(self) -> int:
        return len(self._nodes)

    def _track(self, node: ExprNode) -> ExprNode:
        if node.id not in self._nodes:
            self._nodes[node.id] = node
        return node

    def input(self, rows: int, cols: int, seed: int = 0,
              dist: str = "uniform", name: Optional[str] = None) -> ExprNode:
        ref = MatrixRef(id=name or _fresh_id("m"), rows=rows, cols=cols,
                        seed=seed, dist=dist)
        node = self._track(input_node(ref))
        self.trace.append(node)
        return node

    def record(self, op: str, operands: Sequence[Union[ExprNode, MatrixRef]],
               scalar: Optional[float] = None) -> ExprNode:
        """Record one operation; performs no numeric computation."""
        if op not in ALL_OPS or op == "input":
            raise ProgramError(f"unsupported operator {op!r}")
        if self.node_count > self.threshold:
            self._autoforce()

        nodes = [o if isinstance(o, ExprNode) else self._track(input_node(o))
                 for o in operands]
        arity = 2 if op in BINARY_OPS else 1
        if len(nodes) != arity:
            raise ProgramError(f"{op} expects {arity} operands, "
                               f"got {len(nodes)}")
        if op in SCALAR_OPS and scalar is None:
            raise ProgramError(f"{op} requires a scalar value")
        shape = _result_shape(op, [n.shape for n in nodes],
                              [n.id for n in nodes])
        node = ExprNode(id=_fresh_id("n"), op=op, shape=shape,
                        children=tuple(nodes), scalar=scalar)
        self._track(node)
        for n in nodes:
            if n in self.trace:
                self.trace.remove(n)
        self.trace.append(node)
        return node

    def _autoforce(self):
        self.autoforce_count += 1
        if self.materializer is not None:
            for root in list(self.trace):
                self.materializer(root)
        self.trace.clear()
        self._nodes.clear()

    def force(self, root: ExprNode):
        """Materialize ``root``: rewrite the DAG and lower it to tasks.

        Returns the TaskDag produced by the rewrite stage; consumed nodes
        leave the trace.
        """
        if root.id not in self._nodes:
            raise ProgramError(f"node {root.id} does not belong to this "
                               "session")
        from . import rewrite  # deferred: rewrite imports nothing from here at import time

        dag = rewrite.optimize(root)
        tasks = rewrite.lower_to_tasks(dag)
        consumed = reachable_nodes(root)
        if root in self.trace:
            self.trace.remove(root)
        for node in consumed:
            self._nodes.pop(node.id, None)
        return tasks


def reachable_nodes(root: ExprNode) -> list[ExprNode]:
    """All distinct nodes under ``root`` in deterministic postorder."""
    seen: dict[str, ExprNode] = {}
    order: list[ExprNode] = []

    def walk(node: ExprNode):
        if node.id in seen:
            return
        seen[node.id] = node
        for child in node.children:
            walk(child)
        order.append(node)

    walk(root)
    return order


# --- program file format -------------------------------------------------
#
#   P = input 256 256 11 [uniform|stochastic]
#   t1 = mul P P
#   t2 = smul t1 0.5
#   t3 = sin t2
#   force t3
#
# One statement per line; '#' starts a comment.


@dataclass
class Program:
    """Parsed program: named statements plus the roots to force."""

    statements: list[tuple] = field(default_factory=list)
    force_ids: list[str] = field(default_factory=list)
    source: str = ""

    def input_specs(self) -> list[MatrixRef]:
        return [st[1] for st in self.statements if st[0] == "input"]


def parse_program(text: str) -> Program:
    prog = Program(source=text)
    names: dict[str, tuple[int, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        try:
            if toks[0] == "force":
                if len(toks) != 2 or toks[1] not in names:
                    raise ProgramError(f"line {lineno}: force needs a known id")
                prog.force_ids.append(toks[1])
                continue
            if len(toks) < 3 or toks[1] != "=":
                raise ProgramError(f"line {lineno}: expected 'id = op ...'")
            name, op, args = toks[0], toks[2], toks[3:]
            if name in names:
                raise ProgramError(f"line {lineno}: id {name!r} redefined")
            if op == "input":
                rows, cols, seed = int(args[0]), int(args[1]), int(args[2])
                dist = args[3] if len(args) > 3 else "uniform"
                if dist not in ("uniform", "stochastic"):
                    raise ProgramError(f"line {lineno}: unknown distribution "
                                       f"{dist!r}")
                ref = MatrixRef(id=name, rows=rows, cols=cols, seed=seed,
                                dist=dist)
                prog.statements.append(("input", ref))
                names[name] = (rows, cols)
            elif op in BINARY_OPS:
                a, b = args
                shape = _result_shape(op, [names[a], names[b]], [a, b])
                prog.statements.append((op, name, a, b))
                names[name] = shape
            elif op in SCALAR_OPS:
                a, s = args[0], float(args[1])
                prog.statements.append((op, name, a, s))
                names[name] = names[a]
            elif op in UNARY_OPS or op == "transpose":
                a = args[0]
                shape = _result_shape(op, [names[a]], [a])
                prog.statements.append((op, name, a))
                names[name] = shape
            else:
                raise ProgramError(f"line {lineno}: unknown op {op!r}")
        except (ShapeError, ProgramError):
            raise
        except (KeyError, IndexError, ValueError) as exc:
            raise ProgramError(f"line {lineno}: cannot parse {line!r}") from exc
    if not prog.force_ids:
        raise ProgramError("program has no force statement")
    return prog


def replay_program(prog: Program, session: Optional[Session] = None
                   ) -> tuple[Session, ExprNode]:
    """Record a parsed program into a session and return the forced root."""
    session = session or Session()
    env: dict[str, ExprNode] = {}
    for st in prog.statements:
        if st[0] == "input":
            ref = st[1]
            env[ref.id] = session.input(ref.rows, ref.cols, ref.seed,
                                        ref.dist, name=ref.id)
        elif st[0] in BINARY_OPS:
            op, name, a, b = st
            env[name] = session.record(op, [env[a], env[b]])
        elif st[0] in SCALAR_OPS:
            op, name, a, s = st
            env[name] = session.record(op, [env[a]], scalar=s)
        else:
            op, name, a = st
            env[name] = session.record(op, [env[a]])
    if len(prog.force_ids) != 1:
        raise ProgramError("pipeline supports exactly one force per program")
    return session, env[prog.force_ids[0]]
