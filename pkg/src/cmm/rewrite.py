"""Expression-DAG rewriting and lowering to a task dependency DAG.

Pipeline: common-subexpression elimination, power-chain rewriting into
squaring form, CSE again (squaring introduces sharing), then any
registered custom rules.  All passes are pure; input DAGs are never
mutated.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import IntegrityError
from .expr import ExprNode, MatrixRef, reachable_nodes

COMPUTE_KINDS = ("matmul", "add", "sub", "emul", "sadd", "ssub", "smul",
                 "sdiv", "sin", "cos", "transpose")

_OP_TO_KIND = {"mul": "matmul"}


@dataclass(frozen=True)
class Operand:
    """Reference to a task output or an input matrix, with its shape."""

    source: str  # "task" | "input"
    id: str
    shape: tuple[int, int]


@dataclass(frozen=True)
class Task:
    id: str
    kind: str
    out_shape: tuple[int, int]
    operands: tuple[Operand, ...]
    scalar: Optional[float] = None


@dataclass
class TaskDag:
    """Dependency DAG of matrix-level tasks; edges carry the operand slot."""

    tasks: list[Task] = field(default_factory=list)
    edges: list[tuple[str, str, int]] = field(default_factory=list)
    inputs: dict[str, MatrixRef] = field(default_factory=dict)
    root: str = ""  # id of the copy-back task

    def task_map(self) -> dict[str, Task]:
        return {t.id: t for t in self.tasks}

    def compute_tasks(self) -> list[Task]:
        return [t for t in self.tasks if t.kind != "copy_back"]

    def to_json(self) -> str:
        doc = {
            "format": "cmm-taskdag/1",
            "inputs": [{"id": r.id, "rows": r.rows, "cols": r.cols,
                        "seed": r.seed, "dist": r.dist}
                       for r in self.inputs.values()],
            "tasks": [{"id": t.id, "kind": t.kind,
                       "out": list(t.out_shape),
                       "operands": [[o.source, o.id, list(o.shape)]
                                    for o in t.operands],
                       **({"scalar": t.scalar} if t.scalar is not None else {})}
                      for t in self.tasks],
            "edges": [list(e) for e in self.edges],
            "root": self.root,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


# --- CSE -------------------------------------------------------------------

def eliminate_common_subexpressions(root: ExprNode) -> ExprNode:
    """Merge structurally identical subtrees into shared nodes."""
    canon: dict[tuple, ExprNode] = {}
    rebuilt: dict[str, ExprNode] = {}

    for node in reachable_nodes(root):
        children = tuple(rebuilt[c.id] for c in node.children)
        if node.op == "input":
            key = ("input", node.ref.id)
        else:
            key = (node.op, node.scalar, tuple(c.id for c in children))
        if key in canon:
            rebuilt[node.id] = canon[key]
            continue
        if children == node.children:
            new = node
        else:
            new = ExprNode(id=node.id, op=node.op, shape=node.shape,
                           children=children, ref=node.ref,
                           scalar=node.scalar)
        canon[key] = new
        rebuilt[node.id] = new
    return rebuilt[root.id]


# --- exponentiation by squaring ---------------------------------------------

def _chain(node: ExprNode, memo: dict) -> tuple[ExprNode, int]:
    """Longest same-base multiplication chain ending at ``node``.

    Returns (base, k) meaning node == base^k; k == 1 when the node is not
    a same-base product (the node then acts as its own base).
    """
    if node.id in memo:
        return memo[node.id]
    result = (node, 1)
    if node.op == "mul":
        lb, lk = _chain(node.children[0], memo)
        rb, rk = _chain(node.children[1], memo)
        if lb is rb:
            result = (lb, lk + rk)
    memo[node.id] = result
    return result


def _power_tree(base: ExprNode, k: int, fresh: Callable[[], str]) -> ExprNode:
    """Binary-method power: squarings for each bit, combines for set bits."""
    def mul(a: ExprNode, b: ExprNode) -> ExprNode:
        m, n = a.shape
        return ExprNode(id=fresh(), op="mul", shape=(m, b.shape[1]),
                        children=(a, b))

    acc: Optional[ExprNode] = None
    square = base
    bit = 0
    while (1 << bit) <= k:
        if k & (1 << bit):
            acc = square if acc is None else mul(acc, square)
        bit += 1
        if (1 << bit) <= k:
            square = mul(square, square)
    assert acc is not None
    return acc


def rewrite_exponentiation(root: ExprNode) -> ExprNode:
    """Replace maximal same-base product chains with squaring trees."""
    chains: dict = {}
    _chain(root, chains)
    counter = itertools.count()
    fresh = lambda: f"pw{next(counter)}"
    rebuilt: dict[str, ExprNode] = {}

    def rebuild(node: ExprNode) -> ExprNode:
        if node.id in rebuilt:
            return rebuilt[node.id]
        base, k = chains.get(node.id, (node, 1))
        if k >= 2:
            new = _power_tree(rebuild(base), k, fresh)
        else:
            children = tuple(rebuild(c) for c in node.children)
            if children == node.children:
                new = node
            else:
                new = ExprNode(id=node.id, op=node.op, shape=node.shape,
                               children=children, ref=node.ref,
                               scalar=node.scalar)
        rebuilt[node.id] = new
        return new

    return rebuild(root)


# --- custom rule registry ----------------------------------------------------
#
# Extension point for further algebraic rewrites (pseudo-inverse based
# solves, factorization-assisted powers, ...).  No rules ship by default.

RewriteRule = Callable[[ExprNode], ExprNode]
_RULES: list[tuple[str, RewriteRule]] = []


def register_rule(name: str, rule: RewriteRule) -> None:
    if any(n == name for n, _ in _RULES):
        raise IntegrityError(f"rewrite rule {name!r} already registered")
    _RULES.append((name, rule))


def registered_rules() -> list[str]:
    return [n for n, _ in _RULES]


def clear_rules() -> None:
    _RULES.clear()


def optimize(root: ExprNode) -> ExprNode:
    """Full rewrite pipeline: CSE, squaring, CSE, then custom rules."""
    root = eliminate_common_subexpressions(root)
    root = rewrite_exponentiation(root)
    root = eliminate_common_subexpressions(root)
    for _, rule in _RULES:
        root = eliminate_common_subexpressions(rule(root))
    return root


# --- lowering ---------------------------------------------------------------

def lower_to_tasks(root: ExprNode) -> TaskDag:
    """One task per non-input node, plus a copy-back task for the root."""
    dag = TaskDag()
    node_operand: dict[str, Operand] = {}
    counter = itertools.count(1)

    for node in reachable_nodes(root):
        if node.op == "input":
            dag.inputs[node.ref.id] = node.ref
            node_operand[node.id] = Operand("input", node.ref.id, node.shape)
            continue
        tid = f"t{next(counter)}"
        operands = tuple(node_operand[c.id] for c in node.children)
        task = Task(id=tid, kind=_OP_TO_KIND.get(node.op, node.op),
                    out_shape=node.shape, operands=operands,
                    scalar=node.scalar)
        dag.tasks.append(task)
        for slot, op in enumerate(operands):
            if op.source == "task":
                dag.edges.append((op.id, tid, slot))
        node_operand[node.id] = Operand("task", tid, node.shape)

    out = node_operand[root.id]
    cb = Task(id="out", kind="copy_back", out_shape=root.shape,
              operands=(out,))
    dag.tasks.append(cb)
    if out.source == "task":
        dag.edges.append((out.id, "out", 0))
    dag.root = "out"
    return dag


def topological_order(dag: TaskDag) -> list[str]:
    """Deterministic topo order (tasks are already emitted in one)."""
    order = [t.id for t in dag.tasks]
    pos = {tid: i for i, tid in enumerate(order)}
    for src, dst, _ in dag.edges:
        if pos[src] >= pos[dst]:
            raise IntegrityError(f"task order violates edge {src}->{dst}")
    return order
