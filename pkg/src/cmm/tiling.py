"""Tiling of matrices and task DAGs, plus startup-phase split/merge.

Tiles carry 1-based inclusive index ranges (``row_lo..row_hi``) and
partition their parent exactly, ragged last row/column included.  A
``TiledTaskDag`` re-expresses an entire task DAG at one tile size:
matmuls become per-output-tile accumulation chains (alloc + zero + one
multiply-accumulate per inner tile, ascending inner index), elementwise
ops become one task per tile.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from .errors import IntegrityError, ShapeError
from .expr import MatrixRef
from .rewrite import Task, TaskDag

BYTES_PER_ELEM = 8  # float64 throughout


def cld(a: int, b: int) -> int:
    """Ceiling division: smallest integer >= a/b."""
    if b < 1:
        raise ShapeError(f"cld: divisor must be >= 1, got {b}")
    return -(-a // b)


@dataclass(frozen=True)
class Tile:
    """One rectangular block of a sheet (input matrix or task output)."""

    sheet: str
    i: int
    j: int
    row_lo: int  # 1-based inclusive
    row_hi: int
    col_lo: int
    col_hi: int
    level: int = 0
    parent: Optional[str] = None
    si: int = -1
    sj: int = -1

    @property
    def key(self) -> str:
        if self.level == 0:
            return f"{self.sheet}[{self.i},{self.j}]"
        return f"{self.parent}/{self.si}.{self.sj}"

    @property
    def rows(self) -> int:
        return self.row_hi - self.row_lo + 1

    @property
    def cols(self) -> int:
        return self.col_hi - self.col_lo + 1

    @property
    def nbytes(self) -> int:
        return self.rows * self.cols * BYTES_PER_ELEM

    @property
    def row_slice(self) -> slice:
        return slice(self.row_lo - 1, self.row_hi)

    @property
    def col_slice(self) -> slice:
        return slice(self.col_lo - 1, self.col_hi)


@dataclass
class TileGrid:
    matrix: MatrixRef
    tile_rows: int
    tile_cols: int
    grid: list[list[Tile]]

    @property
    def shape(self) -> tuple[int, int]:
        return (len(self.grid), len(self.grid[0]))


def _grid_tiles(sheet: str, rows: int, cols: int, tile_rows: int,
                tile_cols: int) -> list[list[Tile]]:
    nr, nc = cld(rows, tile_rows), cld(cols, tile_cols)
    out = []
    for i in range(nr):
        row = []
        for j in range(nc):
            row.append(Tile(
                sheet=sheet, i=i, j=j,
                row_lo=tile_rows * i + 1,
                row_hi=min(tile_rows * (i + 1), rows),
                col_lo=tile_cols * j + 1,
                col_hi=min(tile_cols * (j + 1), cols),
            ))
        out.append(row)
    return out


def tile(matrix: MatrixRef, tile_size: tuple[int, int]) -> TileGrid:
    """Partition a matrix into a cld(rows,tr) x cld(cols,tc) grid."""
    tr, tc = tile_size
    if tr < 1 or tc < 1:
        raise ShapeError(f"tile size must be >= 1, got {tile_size}")
    return TileGrid(matrix, tr, tc,
                    _grid_tiles(f"i:{matrix.id}", matrix.rows, matrix.cols,
                                tr, tc))


@dataclass(frozen=True)
class TiledTask:
    """One unit of tiled work.

    ``out`` is the tile key written ("" for copy-back, which only reads);
    ``dims`` are the cost-model dimensions (m, n, k) with k == 0 for
    everything but multiply-accumulate.
    """

    id: str
    kind: str
    out: str
    reads: tuple[str, ...]
    dims: tuple[int, int, int]
    scalar: Optional[float] = None
    base_task: str = ""


@dataclass
class TiledTaskDag:
    base: TaskDag
    tile_size: tuple[int, int]
    tiles: dict[str, Tile] = field(default_factory=dict)
    tasks: list[TiledTask] = field(default_factory=list)
    deps: dict[str, tuple[str, ...]] = field(default_factory=dict)
    input_tiles: set[str] = field(default_factory=set)
    split: dict[str, tuple[str, ...]] = field(default_factory=dict)
    root_tiles: tuple[str, ...] = ()

    def task_map(self) -> dict[str, TiledTask]:
        return {t.id: t for t in self.tasks}

    def finalize(self) -> "TiledTaskDag":
        """Recompute dependency edges from reads/writes in task order."""
        writer: dict[str, str] = {}
        deps: dict[str, tuple[str, ...]] = {}
        for task in self.tasks:
            found = set()
            for key in task.reads:
                if key in writer:
                    found.add(writer[key])
                elif key not in self.input_tiles:
                    raise IntegrityError(
                        f"task {task.id} reads {key} before it is produced")
            if task.out:
                if task.out in writer:
                    found.add(writer[task.out])
                writer[task.out] = task.id
            deps[task.id] = tuple(sorted(found))
        self.deps = deps
        return self

    def edges(self) -> list[tuple[str, str]]:
        return [(d, t.id) for t in self.tasks for d in self.deps[t.id]]

    def to_json(self) -> str:
        doc = {
            "format": "cmm-tileddag/1",
            "tile_size": list(self.tile_size),
            "tiles": {k: {"sheet": t.sheet, "pos": [t.i, t.j],
                          "rows": [t.row_lo, t.row_hi],
                          "cols": [t.col_lo, t.col_hi],
                          "level": t.level}
                      for k, t in sorted(self.tiles.items())},
            "tasks": [{"id": t.id, "kind": t.kind, "out": t.out,
                       "reads": list(t.reads), "dims": list(t.dims),
                       **({"scalar": t.scalar} if t.scalar is not None else {})}
                      for t in self.tasks],
            "edges": [list(e) for e in self.edges()],
            "root_tiles": list(self.root_tiles),
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _sheet_of(operand) -> str:
    return (f"i:{operand.id}" if operand.source == "input"
            else f"t:{operand.id}")


def tile_task_dag(dag: TaskDag, tile_size: tuple[int, int]) -> TiledTaskDag:
    """Lower a task DAG to tiled tasks at one tile size."""
    tr, tc = tile_size
    if tr < 1 or tc < 1:
        raise ShapeError(f"tile size must be >= 1, got {tile_size}")
    needs_square = any(t.kind in ("matmul", "transpose")
                       for t in dag.tasks)
    if needs_square and tr != tc:
        raise ShapeError("matmul/transpose tiling requires square tiles")

    tdag = TiledTaskDag(base=dag, tile_size=tile_size)
    grids: dict[str, list[list[Tile]]] = {}

    def grid_for(sheet: str, rows: int, cols: int) -> list[list[Tile]]:
        if sheet not in grids:
            g = _grid_tiles(sheet, rows, cols, tr, tc)
            grids[sheet] = g
            for row in g:
                for t in row:
                    tdag.tiles[t.key] = t
                    if sheet.startswith("i:"):
                        tdag.input_tiles.add(t.key)
        return grids[sheet]

    for ref in dag.inputs.values():
        grid_for(f"i:{ref.id}", ref.rows, ref.cols)

    for task in dag.tasks:
        if task.kind == "copy_back":
            src = task.operands[0]
            g = grid_for(_sheet_of(src), *src.shape)
            keys = []
            for row in g:
                for t in row:
                    tdag.tasks.append(TiledTask(
                        id=f"cb[{t.i},{t.j}]", kind="copy_back", out="",
                        reads=(t.key,), dims=(t.rows, t.cols, 0),
                        base_task=task.id))
                    keys.append(t.key)
            tdag.root_tiles = tuple(keys)
            continue

        out_sheet = f"t:{task.id}"
        if task.kind == "matmul":
            a, b = task.operands
            ag = grid_for(_sheet_of(a), *a.shape)
            bg = grid_for(_sheet_of(b), *b.shape)
            og = grid_for(out_sheet, *task.out_shape)
            inner = len(bg)  # == cld(n, tc) by the square-tile guarantee
            assert inner == len(ag[0])
            for row in og:
                for ot in row:
                    i, j = ot.i, ot.j
                    tdag.tasks.append(TiledTask(
                        id=f"{task.id}[{i},{j}]:a", kind="alloc", out=ot.key,
                        reads=(), dims=(ot.rows, ot.cols, 0),
                        base_task=task.id))
                    tdag.tasks.append(TiledTask(
                        id=f"{task.id}[{i},{j}]:z", kind="zero", out=ot.key,
                        reads=(), dims=(ot.rows, ot.cols, 0),
                        base_task=task.id))
                    for l in range(inner):
                        at, bt = ag[i][l], bg[l][j]
                        tdag.tasks.append(TiledTask(
                            id=f"{task.id}[{i},{j}]:m{l}", kind="matmul",
                            out=ot.key, reads=(at.key, bt.key),
                            dims=(at.rows, at.cols, bt.cols),
                            base_task=task.id))
        elif task.kind == "transpose":
            src = task.operands[0]
            sg = grid_for(_sheet_of(src), *src.shape)
            og = grid_for(out_sheet, *task.out_shape)
            for row in og:
                for ot in row:
                    st = sg[ot.j][ot.i]
                    tdag.tasks.append(TiledTask(
                        id=f"{task.id}[{ot.i},{ot.j}]", kind="transpose",
                        out=ot.key, reads=(st.key,),
                        dims=(st.rows, st.cols, 0), base_task=task.id))
        else:
            # elementwise, scalar and unary kinds share tile geometry
            srcs = [grid_for(_sheet_of(o), *o.shape) for o in task.operands]
            og = grid_for(out_sheet, *task.out_shape)
            for row in og:
                for ot in row:
                    reads = tuple(g[ot.i][ot.j].key for g in srcs)
                    tdag.tasks.append(TiledTask(
                        id=f"{task.id}[{ot.i},{ot.j}]", kind=task.kind,
                        out=ot.key, reads=reads,
                        dims=(ot.rows, ot.cols, 0), scalar=task.scalar,
                        base_task=task.id))
    return tdag.finalize()


# --- dynamic startup tiling ---------------------------------------------------

def subtiles_of(tile_obj: Tile, factor: int) -> list[Tile]:
    """Split one tile into (up to) factor x factor sub-tiles."""
    sub_r = cld(tile_obj.rows, factor)
    sub_c = cld(tile_obj.cols, factor)
    subs = []
    for si in range(cld(tile_obj.rows, sub_r)):
        for sj in range(cld(tile_obj.cols, sub_c)):
            subs.append(Tile(
                sheet=tile_obj.sheet, i=tile_obj.i, j=tile_obj.j,
                row_lo=tile_obj.row_lo + sub_r * si,
                row_hi=min(tile_obj.row_lo + sub_r * (si + 1) - 1,
                           tile_obj.row_hi),
                col_lo=tile_obj.col_lo + sub_c * sj,
                col_hi=min(tile_obj.col_lo + sub_c * (sj + 1) - 1,
                           tile_obj.col_hi),
                level=1, parent=tile_obj.key, si=si, sj=sj))
    return subs


def dynamic_split(tdag: TiledTaskDag, schedule_hint: Iterable[str],
                  factor: int = 2) -> TiledTaskDag:
    """Split hinted startup operand tiles into prioritized sub-tiles.

    Consumers of a hinted tile are re-expressed over its sub-tiles; a
    later ``merge_subtiles`` pass restores level-0 reads with explicit
    merge tasks.
    """
    if factor < 2:
        raise ShapeError(f"split factor must be >= 2, got {factor}")
    hinted = {k for k in schedule_hint if k in tdag.input_tiles
              and k not in tdag.split}
    if not hinted:
        return tdag

    out = TiledTaskDag(base=tdag.base, tile_size=tdag.tile_size,
                       tiles=dict(tdag.tiles),
                       input_tiles=set(tdag.input_tiles),
                       split=dict(tdag.split), root_tiles=tdag.root_tiles)
    expansion: dict[str, tuple[str, ...]] = {}
    for key in sorted(hinted):
        subs = subtiles_of(tdag.tiles[key], factor)
        keys = tuple(s.key for s in subs)
        for s in subs:
            out.tiles[s.key] = s
            out.input_tiles.add(s.key)
        out.split[key] = keys
        expansion[key] = keys

    for task in tdag.tasks:
        if any(k in expansion for k in task.reads):
            reads = []
            for k in task.reads:
                reads.extend(expansion.get(k, (k,)))
            task = replace(task, reads=tuple(reads))
        out.tasks.append(task)
    return out.finalize()


def merge_subtiles(tdag: TiledTaskDag) -> TiledTaskDag:
    """Insert merge tasks so every compute task reads level-0 tiles only."""
    if not tdag.split:
        return tdag
    sub_to_parent = {s: parent for parent, subs in tdag.split.items()
                     for s in subs}
    out = TiledTaskDag(base=tdag.base, tile_size=tdag.tile_size,
                       tiles=dict(tdag.tiles),
                       input_tiles=set(tdag.input_tiles),
                       split=dict(tdag.split), root_tiles=tdag.root_tiles)
    merged: set[str] = set()
    for task in tdag.tasks:
        if task.kind != "merge" and any(k in sub_to_parent
                                        for k in task.reads):
            reads = []
            i = 0
            while i < len(task.reads):
                k = task.reads[i]
                parent = sub_to_parent.get(k)
                if parent is None:
                    reads.append(k)
                    i += 1
                    continue
                subs = tdag.split[parent]
                if tuple(task.reads[i:i + len(subs)]) != subs:
                    raise IntegrityError(
                        f"task {task.id}: partial sub-tile read of {parent}")
                if parent not in merged:
                    p = tdag.tiles[parent]
                    out.tasks.append(TiledTask(
                        id=f"mg:{parent}", kind="merge", out=parent,
                        reads=subs, dims=(p.rows, p.cols, 0)))
                    merged.add(parent)
                reads.append(parent)  # multiplicity preserved per position
                i += len(subs)
            task = replace(task, reads=tuple(reads))
        out.tasks.append(task)
    return out.finalize()
