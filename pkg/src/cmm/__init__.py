"""cmm: lazy matrix-program capture, tiling, scheduling and emulation.

Pipeline: record a matrix program as an expression DAG, rewrite it (CSE,
exponentiation by squaring), lower to tiled task DAGs over a ladder of
tile sizes, predict per-task costs from a profiled regression model,
schedule with a cache-aware HEFT variant, pick the tile size with the
smallest simulated makespan, and execute on an emulated cluster.
"""

from .cluster import (ClusterSpec, LinkSpec, NodeSpec, auto_configure,
                      detect_saturation, load_cluster, rank_nodes)
from .errors import CmmError
from .expr import ExprNode, MatrixRef, Program, Session, parse_program
from .rewrite import (Task, TaskDag, eliminate_common_subexpressions,
                      lower_to_tasks, rewrite_exponentiation)
from .scheduler import (Schedule, ScheduledTask, ScheduleOpts,
                        candidate_sweep, schedule, upward_rank,
                        validate_schedule)
from .simulator import SimEvent, SimResult, predict_and_select, simulate
from .executor import (RunReport, execute, gen_matrix, max_rel_error,
                       reference_eval)
from .tiling import (Tile, TileGrid, TiledTaskDag, cld, dynamic_split,
                     merge_subtiles, tile, tile_task_dag)
from .timemodel import ProfileSample, TimeModel, fit

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "LinkSpec", "NodeSpec", "auto_configure",
    "detect_saturation", "load_cluster", "rank_nodes", "CmmError",
    "ExprNode", "MatrixRef", "Program", "Session", "parse_program", "Task",
    "TaskDag", "eliminate_common_subexpressions", "lower_to_tasks",
    "rewrite_exponentiation", "Schedule", "ScheduledTask", "ScheduleOpts",
    "candidate_sweep", "schedule", "upward_rank", "validate_schedule",
    "SimEvent", "SimResult", "predict_and_select", "simulate", "RunReport",
    "execute", "gen_matrix", "max_rel_error", "reference_eval", "Tile",
    "TileGrid", "TiledTaskDag", "cld", "dynamic_split", "merge_subtiles",
    "tile", "tile_task_dag", "ProfileSample", "TimeModel", "fit",
    "__version__",
]
