import numpy as np
import pytest

from services.autodiff import (
    SUPPORTED_OPS,
    DiffGraph,
    DomainError,
    ShapeError,
    backward,
    evaluate,
    finite_difference_check,
)

TOL = 1e-6

# positive, well away from kinks, ties and stationary points
X = np.array([[0.55, 0.8, 1.1], [1.3, 0.65, 0.95], [1.45, 0.7, 1.2], [0.6, 1.35, 0.9]])
W = np.linspace(0.5, 1.5, 12).reshape(4, 3)
B = np.array([[0.3, 0.9], [0.7, 0.4], [0.5, 1.1]])
V = np.array([0.4, 1.2, 0.8])


def _weighted(graph, node, weights=None):
    weights = W if weights is None else weights
    return graph.sum(graph.mul(node, graph.constant(weights)))


# op name -> (loss builder f(graph, x_id), input)
CASES = {
    "add": (lambda g, x: _weighted(g, g.add(x, g.constant(W))), X),
    "sub": (lambda g, x: _weighted(g, g.sub(g.constant(W), x)), X),
    "mul": (lambda g, x: _weighted(g, g.mul(x, x)), X),
    "div": (lambda g, x: _weighted(g, g.div(g.constant(W), x)), X),
    "scale": (lambda g, s: _weighted(g, g.scale(g.constant(X), s)), np.array([0.7])),
    "affine": (lambda g, x: _weighted(g, g.affine(x, scale=-2.0, shift=0.3)), X),
    "matmul": (lambda g, x: g.sum(g.matmul(x, g.constant(B))), X),
    "sum": (lambda g, x: g.sum(g.square(g.sum(x, axis=0))), X),
    "mean": (lambda g, x: g.sum(g.square(g.mean(x, axis=1))), X),
    "abs": (lambda g, x: _weighted(g, g.abs(g.affine(x, scale=-1.0))), X),
    "square": (lambda g, x: _weighted(g, g.square(x)), X),
    "sqrt": (lambda g, x: _weighted(g, g.sqrt(x)), X),
    "exp": (lambda g, x: _weighted(g, g.exp(x)), X),
    "log": (lambda g, x: _weighted(g, g.log(x)), X),
    "sin": (lambda g, x: _weighted(g, g.sin(g.affine(x, scale=0.8))), X),
    "cos": (lambda g, x: _weighted(g, g.cos(x)), X),
    "sigmoid": (lambda g, x: _weighted(g, g.sigmoid(x)), X),
    "softplus": (lambda g, x: _weighted(g, g.softplus(x, 3.0)), X),
    "maximum_const": (lambda g, x: _weighted(g, g.maximum(x, 1.0)), X),
    "clamp": (lambda g, x: _weighted(g, g.clamp(x, 0.75, 1.25)), X),
    "concat": (lambda g, x: g.sum(g.square(g.concat([x, g.constant(W)]))), X),
    "slice": (lambda g, x: g.sum(g.square(g.slice(x, 1, 3))), X),
    "norm": (lambda g, x: g.sum(g.square(g.norm(x))), X),
    "dot": (lambda g, x: g.sum(g.square(g.dot(x, g.constant(W)))), X),
    "reshape": (lambda g, x: _weighted(g, g.reshape(x, (3, 4)), W.reshape(3, 4)), X),
    "tile_last": (lambda g, x: _weighted(g, g.tile_last(x, 2), np.stack([W, 2.0 * W], axis=-1)), X),
    "gather_rows": (lambda g, x: g.sum(g.square(g.gather_rows(x, np.array([0, 2, 2, 3])))), X),
    "segment_sum": (lambda g, x: g.sum(g.square(g.segment_sum(x, np.array([0, 1, 0, 2]), 3))), X),
    "cumsum": (lambda g, x: g.sum(g.square(g.cumsum(x))), X),
}


def test_every_supported_op_has_a_gradient_case():
    assert set(CASES) == set(SUPPORTED_OPS)


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradient_matches_central_differences(op):
    f, x = CASES[op]
    assert finite_difference_check(f, x) < TOL


def test_row_broadcast_gradient_sums_over_rows():
    def f(g, v):
        return _weighted(g, g.mul(g.constant(X), v))

    assert finite_difference_check(f, V) < TOL
    graph = DiffGraph()
    v = graph.parameter(V)
    loss = _weighted(graph, graph.add(graph.constant(X), v))
    np.testing.assert_allclose(backward(graph, loss)[v], W.sum(axis=0))


def test_exclusive_cumsum_gradient_is_a_shifted_suffix_sum():
    graph = DiffGraph()
    x = graph.parameter(X)
    loss = _weighted(graph, graph.cumsum(x, exclusive=True))
    expected = np.flip(np.cumsum(np.flip(W, axis=1), axis=1), axis=1) - W
    np.testing.assert_allclose(backward(graph, loss)[x], expected)


def test_reduction_over_everything():
    assert finite_difference_check(lambda g, x: g.square(g.mean(x)), X) < TOL


def test_reused_node_accumulates():
    graph = DiffGraph()
    x = graph.parameter([3.0])
    loss = graph.sum(graph.add(graph.mul(x, x), x))
    assert backward(graph, loss)[x] == pytest.approx([7.0])


def test_composite_field_like_chain():
    w = np.array([[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]])

    def f(g, x):
        h = g.softplus(g.matmul(x, g.constant(w)), 10.0)
        return g.mean(g.square(g.sub(g.norm(h), g.constant(np.full(4, 0.5)))))

    assert finite_difference_check(f, X) < 1e-5


def test_non_scalar_loss_is_rejected():
    graph = DiffGraph()
    x = graph.parameter(X)
    with pytest.raises(ShapeError, match="scalar"):
        backward(graph, graph.square(x))


def test_shape_mismatch_names_both_shapes():
    graph = DiffGraph()
    a = graph.constant(np.zeros((2, 3)))
    b = graph.constant(np.zeros((3, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        graph.add(a, b)
    with pytest.raises(ShapeError):
        graph.matmul(a, a)
    with pytest.raises(ShapeError):
        graph.scale(a, b)


@pytest.mark.parametrize("op, value", [("sqrt", -1e-3), ("log", 0.0)])
def test_domain_errors(op, value):
    graph = DiffGraph()
    x = graph.constant([1.0, value])
    with pytest.raises(DomainError, match=op):
        getattr(graph, op)(x)


def test_unknown_op_and_missing_input():
    from services.autodiff import forward_op

    graph = DiffGraph()
    x = graph.constant([1.0])
    with pytest.raises(ValueError, match="Unknown op"):
        forward_op(graph, "tanh", [x])
    with pytest.raises(ValueError, match="does not exist"):
        forward_op(graph, "exp", [5])


def test_only_required_prunes_constant_branches():
    graph = DiffGraph()
    x = graph.parameter([1.0, 2.0])
    c = graph.constant([3.0, 4.0])
    loss = graph.sum(graph.mul(x, graph.exp(c)))
    full = backward(graph, loss)
    pruned = backward(graph, loss, only_required=True)
    assert c in full
    assert c not in pruned
    np.testing.assert_allclose(pruned[x], full[x])


def test_retain_intermediate_false_keeps_leaves_only():
    graph = DiffGraph()
    x = graph.parameter([1.0, 2.0])
    mid = graph.square(x)
    loss = graph.sum(mid)
    grads = backward(graph, loss, retain_intermediate=False)
    assert x in grads
    assert mid not in grads


def test_zero_gradient_at_sqrt_and_norm_origin():
    graph = DiffGraph()
    x = graph.parameter(np.zeros((1, 3)))
    loss = graph.sum(graph.add(graph.norm(x), graph.sqrt(graph.sum(graph.square(x), axis=1))))
    assert np.all(backward(graph, loss)[x] == 0.0)


def test_maximum_tie_goes_to_variable():
    graph = DiffGraph()
    x = graph.parameter([1.0])
    loss = graph.sum(graph.maximum(x, 1.0))
    assert backward(graph, loss)[x] == pytest.approx([1.0])


def test_evaluate_builds_on_a_throwaway_graph():
    out = evaluate(lambda g, a, b: g.dot(a, b), np.ones((2, 3)), np.full((2, 3), 2.0))
    np.testing.assert_allclose(out, [6.0, 6.0])


def test_finite_difference_check_rejects_bad_step():
    with pytest.raises(ValueError, match="step"):
        finite_difference_check(lambda g, x: g.sum(x), np.ones(2), step=0.0)
