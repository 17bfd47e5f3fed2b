import numpy as np
import pytest

from strep.diffengine import Graph
from strep.gradcheck import DEEP_TOL, PRIMITIVE_TOL, SuiteRow, format_table, kink_margin, run_suite


def test_suite_passes_on_two_seeds():
    rows = run_suite(range(2))
    failed = [(row.name, row.worst) for row in rows if not row.passed]
    assert failed == []
    names = {row.name for row in rows}
    assert {"relu", "max_over_points", "rigid_3d", "sigmoid_bce_occupied"} <= names
    assert all(row.seeds == 2 for row in rows)
    assert {row.tol for row in rows} == {PRIMITIVE_TOL, DEEP_TOL}


def test_primitives_only_suite_reports_progress():
    seen = []
    rows = run_suite([5], composites=False, on_progress=lambda p, t, m: seen.append((p, t)))
    assert seen == [(1, 1)]
    assert all(row.tol == PRIMITIVE_TOL for row in rows)


def test_kink_margin_sees_relu_inputs_and_pool_gaps():
    graph = Graph()
    graph.relu(graph.constant([0.5, -0.02, 3.0]))
    assert kink_margin(graph) == pytest.approx(0.02)
    graph.max_over_points(graph.constant([[1.0, 4.0], [1.001, 0.0]]))
    assert kink_margin(graph) == pytest.approx(0.001)


def test_kink_margin_skips_pooled_columns_clamped_to_zero():
    graph = Graph()
    hidden = graph.relu(graph.constant([[-0.5, 2.0], [-0.3, 1.5], [-0.9, 0.7]]))
    graph.max_over_points(hidden)
    # column 0 is all zeros after the ReLU; only column 1 has a winner to keep
    assert kink_margin(graph) == pytest.approx(0.3)


def test_every_decoder_and_total_case_finds_a_kink_free_point():
    rows = run_suite([0])
    names = {row.name for row in rows}
    assert {"decoder_2d_k1", "decoder_3d_k1", "decoder_2d_k3", "total_loss_2d", "total_loss_3d"} <= names
    assert all(row.passed for row in rows)


def test_kink_margin_of_a_smooth_graph_is_infinite():
    graph = Graph()
    graph.sin(graph.constant(np.ones(3)))
    assert kink_margin(graph) == np.inf


def test_table_marks_failures():
    rows = [SuiteRow("linear", 20, 3e-9, PRIMITIVE_TOL), SuiteRow("total_2d", 20, 2e-3, DEEP_TOL)]
    table = format_table(rows)
    assert table.splitlines()[1].endswith("PASS")
    assert table.splitlines()[2].endswith("FAIL")
    assert rows[1].as_row()["passed"] is False
