"""Capture semantics: shapes, laziness, thresholds, program files."""

import numpy as np
import pytest

from cmm.errors import ProgramError, ShapeError
from cmm.expr import (MatrixRef, Session, parse_program, replay_program)
from cmm.executor import (evaluation_count, gen_matrix, reference_eval,
                          reset_evaluation_count)


def test_record_mul_shape_metadata_only():
    s = Session()
    p = s.input(10000, 10000, seed=1, name="P")
    node = s.record("mul", [p, p])
    assert node.shape == (10000, 10000)


def test_shape_mismatch_names_dimensions():
    s = Session()
    a = s.input(2, 3, name="A")
    b = s.input(3, 2, name="B")
    with pytest.raises(ShapeError, match="2x3"):
        s.record("add", [a, b])


def test_transpose_swaps_dims():
    s = Session()
    a = s.input(2, 3)
    assert s.record("transpose", [a]).shape == (3, 2)


def test_bad_matrix_dims_rejected():
    with pytest.raises(ShapeError):
        MatrixRef(id="x", rows=0, cols=3)


def test_unknown_operator_rejected():
    s = Session()
    a = s.input(2, 2)
    with pytest.raises(ProgramError):
        s.record("inner_product", [a, a])


def test_recording_does_no_numeric_work():
    reset_evaluation_count()
    s = Session()
    p = s.input(512, 512, seed=3)
    node = p
    for _ in range(20):
        node = s.record("mul", [node, p])
    assert evaluation_count() == 0


def test_force_single_input_gives_only_copy_back():
    s = Session()
    p = s.input(8, 8, seed=1, name="P")
    dag = s.force(p)
    kinds = [t.kind for t in dag.tasks]
    assert kinds == ["copy_back"]


def test_force_markov_trace_gives_three_multiplies():
    s = Session()
    p = s.input(64, 64, seed=1, name="P")
    u = s.input(1, 64, seed=2, name="u")
    m = p
    for _ in range(3):
        m = s.record("mul", [m, p])  # P^4
    r = s.record("mul", [u, m])
    dag = s.force(r)
    muls = [t for t in dag.tasks if t.kind == "matmul"]
    assert len(muls) == 3  # squaring: P2, P4, then u*P4
    assert len(dag.tasks) == 4  # plus the copy-back


def test_force_unknown_root_rejected():
    s1, s2 = Session(), Session()
    a = s1.input(4, 4)
    with pytest.raises(ProgramError):
        s2.force(a)


def test_threshold_triggers_autoforce_before_next_record():
    calls = []
    s = Session(threshold=5, materializer=lambda root: calls.append(root))
    a = s.input(4, 4, name="A")
    node = a
    while s.node_count <= s.threshold:
        node = s.record("sadd", [node], scalar=1.0)
    assert s.autoforce_count == 0
    s.record("sadd", [s.input(4, 4, name="B")], scalar=1.0)
    assert s.autoforce_count == 1
    assert calls  # live roots were handed to the materializer


def test_node_count_tracks_distinct_reachable_nodes():
    s = Session()
    a = s.input(4, 4)
    b = s.record("sadd", [a], scalar=2.0)
    s.record("emul", [b, b])
    assert s.node_count == 3


# --- program files -------------------------------------------------------

PROGRAM = """\
# demo
P = input 6 6 11 stochastic
u = input 1 6 12
t1 = mul P P
t2 = smul t1 0.5
t3 = sin t2
t4 = transpose t3
t5 = mul u t4
force t5
"""


def test_parse_and_replay_round_trip():
    prog = parse_program(PROGRAM)
    assert [r.id for r in prog.input_specs()] == ["P", "u"]
    session, root = replay_program(prog)
    assert root.shape == (1, 6)


def test_program_reference_eval_matches_numpy():
    out = reference_eval(PROGRAM)
    P = gen_matrix(parse_program(PROGRAM).input_specs()[0])
    u = gen_matrix(parse_program(PROGRAM).input_specs()[1])
    expected = u @ np.sin(0.5 * (P @ P)).T
    assert np.allclose(out, expected, rtol=1e-12)


@pytest.mark.parametrize("bad", [
    "force x",
    "a = input 4 4",          # missing seed
    "a = input 4 4 1\nb = frobnicate a\nforce b",
    "a = input 4 4 1\na = input 4 4 2\nforce a",   # redefinition
    "a = input 4 4 1\nb = add a\nforce b",          # arity
    "a = input 4 4 1",         # no force
    "a = input 4 4 1 lumpy\nforce a",               # unknown distribution
])
def test_bad_programs_rejected(bad):
    with pytest.raises(ProgramError):
        parse_program(bad)


def test_stochastic_inputs_are_row_normalized():
    ref = MatrixRef(id="P", rows=12, cols=12, seed=5, dist="stochastic")
    mat = gen_matrix(ref)
    assert np.allclose(mat.sum(axis=1), 1.0)
    assert np.array_equal(mat, gen_matrix(ref))  # deterministic
