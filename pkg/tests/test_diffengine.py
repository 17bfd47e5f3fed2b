import numpy as np
import pytest

from strep import diffengine
from strep.diffengine import Graph, error_floor, grad_check, relative_error
from strep.errors import NumericError, UsageError


def test_linear_backward_matches_hand_derivation(rng):
    w, b, x = rng.normal(size=(3, 2)), rng.normal(size=2), rng.normal(size=(4, 3))
    graph = Graph()
    wn, bn, xn = graph.param("W", w), graph.param("b", b), graph.param("x", x)
    out = graph.linear(wn, bn, xn)
    np.testing.assert_allclose(out.value, x @ w + b)
    grads = graph.backward(graph.sum(out))
    np.testing.assert_allclose(grads["W"], x.T @ np.ones((4, 2)))
    np.testing.assert_allclose(grads["b"], [4.0, 4.0])
    np.testing.assert_allclose(grads["x"], np.ones((4, 2)) @ w.T)


def test_relu_blocks_negative_inputs():
    graph = Graph()
    x = graph.param("x", [-1.0, 0.0, 2.0])
    grads = graph.backward(graph.sum(graph.relu(x)))
    np.testing.assert_array_equal(grads["x"], [0.0, 0.0, 1.0])


def test_max_over_points_ties_go_to_lowest_index():
    graph = Graph()
    x = graph.param("x", [[1.0, 2.0], [1.0, 0.0], [0.5, 2.0]])
    pooled = graph.max_over_points(x)
    np.testing.assert_array_equal(pooled.value, [1.0, 2.0])
    grads = graph.backward(graph.sum(pooled))
    np.testing.assert_array_equal(grads["x"], [[1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])


def test_concat_expands_vector_over_rows():
    graph = Graph()
    points = graph.param("points", np.zeros((3, 2)))
    z = graph.param("z", [1.0, 2.0])
    joined = graph.concat(points, z)
    assert joined.shape == (3, 4)
    np.testing.assert_array_equal(joined.value[:, 2:], [[1.0, 2.0]] * 3)
    grads = graph.backward(graph.sum(joined))
    np.testing.assert_array_equal(grads["z"], [3.0, 3.0])
    np.testing.assert_array_equal(grads["points"], np.ones((3, 2)))


def test_gather_accumulates_repeated_rows():
    graph = Graph()
    x = graph.param("x", np.arange(6.0).reshape(3, 2))
    grads = graph.backward(graph.sum(graph.gather(x, [0, 2, 2])))
    np.testing.assert_array_equal(grads["x"], [[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])


def test_sigmoid_bce_is_stable_for_large_logits():
    graph = Graph()
    logits = graph.param("logits", [1000.0, -1000.0])
    occupied = graph.sigmoid_bce(logits, 1.0)
    free = graph.sigmoid_bce(logits, 0.0)
    np.testing.assert_allclose(occupied.value, [0.0, 1000.0])
    np.testing.assert_allclose(free.value, [1000.0, 0.0])
    grads = graph.backward(graph.sum(occupied))
    np.testing.assert_allclose(grads["logits"], [0.0, -1.0])


def test_sigmoid_bce_at_zero_logit_is_log_two():
    graph = Graph()
    value = graph.sigmoid_bce(graph.constant([0.0]), 1.0).value
    assert value[0] == pytest.approx(np.log(2.0))


def test_sigmoid_bce_rejects_soft_labels():
    graph = Graph()
    with pytest.raises(UsageError):
        graph.sigmoid_bce(graph.constant([0.0]), 0.5)


def test_non_finite_value_names_the_op():
    graph = Graph()
    x = graph.param("x", [10.0])
    with np.errstate(over="ignore"), pytest.raises(NumericError) as info:
        graph.scale(x, 1e308)
    assert info.value.op == "scale"


def test_backward_needs_scalar_root():
    graph = Graph()
    x = graph.param("x", [1.0, 2.0])
    with pytest.raises(UsageError):
        graph.backward(graph.square(x))


def test_unused_parameter_gets_zero_gradient():
    graph = Graph()
    x = graph.param("x", [1.0, 2.0])
    graph.param("unused", np.ones((2, 2)))
    grads = graph.backward(graph.sum(graph.square(x)))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads["x"], [2.0, 4.0])


def test_parameter_names_are_unique():
    graph = Graph()
    graph.param("x", [1.0])
    with pytest.raises(UsageError):
        graph.param("x", [2.0])


def test_mul_requires_equal_shapes():
    graph = Graph()
    with pytest.raises(UsageError):
        graph.mul(graph.constant([1.0, 2.0]), graph.constant([1.0]))


def test_rigid_moves_points():
    graph = Graph()
    moved = graph.rigid(graph.constant([1.0, 2.0]), graph.constant([np.pi / 2]), np.array([[1.0, 0.0]]))
    np.testing.assert_allclose(moved.value, [[1.0, 3.0]], atol=1e-12)


def test_backward_twice_gives_same_gradients(rng):
    graph = Graph()
    x = graph.param("x", rng.normal(size=5))
    root = graph.sum(graph.sin(graph.square(x)))
    first = graph.backward(root)
    second = graph.backward(root)
    np.testing.assert_array_equal(first["x"], second["x"])


def test_grad_check_passes_on_smooth_function(rng):
    def build(graph, nodes):
        return graph.sum(graph.mul(graph.sin(nodes["a"]), graph.cos(nodes["b"])))

    report = grad_check(build, {"a": rng.normal(size=4), "b": rng.normal(size=4)})
    assert report.passed
    assert set(report.max_rel_error) == {"a", "b"}


def test_relative_error_has_unit_floor():
    assert relative_error(np.array(1e-9), np.array(2e-9)) == pytest.approx(1e-9)
    assert relative_error(np.array(100.0), np.array(101.0)) == pytest.approx(1.0 / 101.0)


def test_error_floor_follows_the_function_scale():
    assert error_floor(0.5) == pytest.approx(1e-2)
    assert error_floor(-30.0) == pytest.approx(0.3)
    assert error_floor(1e4) == 1.0


class _FlippedScale(Graph):
    def scale(self, x, factor):
        node = super().scale(x, factor)
        correct = node._backward
        node._backward = lambda g: correct(-g)
        return node


def test_grad_check_catches_a_sign_error_in_a_small_gradient(rng, monkeypatch):
    monkeypatch.setattr(diffengine, "Graph", _FlippedScale)

    def build(graph, nodes):
        return graph.sum(graph.scale(nodes["x"], 1e-6))

    report = grad_check(build, {"x": rng.normal(size=4)})
    assert not report.passed
    assert report.max_rel_error["x"] == pytest.approx(2e-4, rel=1e-3)


def test_constants_receive_no_adjoint(rng):
    graph = Graph()
    w = graph.param("w", rng.normal(size=(3, 2)))
    b = graph.constant(np.zeros(2))
    x = graph.constant(rng.normal(size=(5, 3)))
    out = graph.linear(w, b, x)
    graph.backward(graph.sum(out))
    assert out.requires_grad and not x.requires_grad
    assert x.adjoint is None and b.adjoint is None
    np.testing.assert_allclose(w.adjoint, np.tile(x.value.sum(axis=0)[:, None], (1, 2)))


def test_graph_without_parameters_has_nothing_to_propagate():
    graph = Graph()
    root = graph.sum(graph.constant([1.0, 2.0]))
    assert graph.backward(root) == {}
    assert not root.requires_grad


def test_single_precision_products_stay_close(rng):
    w, b, x = rng.normal(size=(6, 4)), rng.normal(size=4), rng.normal(size=(10, 6))
    results = []
    for dtype in (np.float64, np.float32):
        graph = Graph(matmul_dtype=dtype)
        wn, xn = graph.param("w", w), graph.param("x", x)
        out = graph.linear(wn, graph.constant(b), xn)
        grads = graph.backward(graph.sum(graph.square(out)))
        assert out.value.dtype == np.float64
        results.append((out.value, grads["w"], grads["x"]))
    for exact, single in zip(*results):
        np.testing.assert_allclose(single, exact, rtol=1e-4, atol=1e-4)


def test_matmul_precision_must_be_a_float_type():
    with pytest.raises(UsageError):
        Graph(matmul_dtype=np.int32)
