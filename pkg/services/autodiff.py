"""
Reverse-mode automatic differentiation on an append-only tape.

Every differentiable quantity of the pipeline is a node of a `DiffGraph`:
- `forward_op(graph, op, inputs, attrs)` appends one node computed from its parents
- `backward(graph, loss)` walks the tape in reverse and returns d(loss)/d(node)
- `finite_difference_check(...)` compares the two against central differences

Shapes follow a strict rule set: elementwise binaries need equal shapes, with
one exception (a 1-D vector row-broadcast over a 2-D matrix). Scalars multiply
arrays only through the explicit `scale` op.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

logger = logging.getLogger("autodiff")

# ---- SETTINGS ----
DTYPE = np.float64
FD_DENOMINATOR_FLOOR = 1e-8


class ShapeError(ValueError):
    """Incompatible input shapes for an op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an op (log/sqrt)."""


# ---- DOMAIN TYPES ----
@dataclass
class DiffValue:
    id: int
    shape: Tuple[int, ...]
    data: np.ndarray
    op: str
    parents: Tuple[int, ...] = ()
    attrs: Dict[str, Any] = field(default_factory=dict)
    requires_grad: bool = False


class DiffGraph:
    """
    Append-only tape. Node ids equal their position, so parents always
    precede children and reverse order is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: List[DiffValue] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # --- leaves ---
    def _append_leaf(self, array, op: str, requires_grad: bool) -> int:
        data = np.array(array, dtype=DTYPE)
        node = DiffValue(id=len(self.nodes), shape=tuple(data.shape), data=data, op=op,
                         requires_grad=requires_grad)
        self.nodes.append(node)
        return node.id

    def parameter(self, array) -> int:
        """Leaf that receives gradients."""
        return self._append_leaf(array, "leaf", True)

    def constant(self, array) -> int:
        """Leaf treated as data; gradients are still reported unless pruned."""
        return self._append_leaf(array, "const", False)

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].data

    def shape(self, nid: int) -> Tuple[int, ...]:
        return self.nodes[nid].shape

    # --- op shorthands ---
    def add(self, a: int, b: int) -> int:
        return forward_op(self, "add", [a, b])

    def sub(self, a: int, b: int) -> int:
        return forward_op(self, "sub", [a, b])

    def mul(self, a: int, b: int) -> int:
        return forward_op(self, "mul", [a, b])

    def div(self, a: int, b: int) -> int:
        return forward_op(self, "div", [a, b])

    def scale(self, x: int, s: int) -> int:
        return forward_op(self, "scale", [x, s])

    def affine(self, x: int, scale: float = 1.0, shift: float = 0.0) -> int:
        return forward_op(self, "affine", [x], {"scale": float(scale), "shift": float(shift)})

    def matmul(self, a: int, b: int) -> int:
        return forward_op(self, "matmul", [a, b])

    def sum(self, x: int, axis: Optional[int] = None) -> int:
        return forward_op(self, "sum", [x], {"axis": axis})

    def mean(self, x: int, axis: Optional[int] = None) -> int:
        return forward_op(self, "mean", [x], {"axis": axis})

    def abs(self, x: int) -> int:
        return forward_op(self, "abs", [x])

    def square(self, x: int) -> int:
        return forward_op(self, "square", [x])

    def sqrt(self, x: int) -> int:
        return forward_op(self, "sqrt", [x])

    def exp(self, x: int) -> int:
        return forward_op(self, "exp", [x])

    def log(self, x: int) -> int:
        return forward_op(self, "log", [x])

    def sin(self, x: int) -> int:
        return forward_op(self, "sin", [x])

    def cos(self, x: int) -> int:
        return forward_op(self, "cos", [x])

    def sigmoid(self, x: int) -> int:
        return forward_op(self, "sigmoid", [x])

    def softplus(self, x: int, beta: float = 1.0) -> int:
        return forward_op(self, "softplus", [x], {"beta": float(beta)})

    def maximum(self, x: int, c: float) -> int:
        return forward_op(self, "maximum_const", [x], {"c": float(c)})

    def clamp(self, x: int, lo: float, hi: float) -> int:
        return forward_op(self, "clamp", [x], {"lo": float(lo), "hi": float(hi)})

    def concat(self, xs: Sequence[int]) -> int:
        return forward_op(self, "concat", list(xs))

    def slice(self, x: int, start: int, stop: int) -> int:
        return forward_op(self, "slice", [x], {"start": int(start), "stop": int(stop)})

    def norm(self, x: int) -> int:
        return forward_op(self, "norm", [x])

    def dot(self, a: int, b: int) -> int:
        return forward_op(self, "dot", [a, b])

    def reshape(self, x: int, shape: Sequence[int]) -> int:
        return forward_op(self, "reshape", [x], {"shape": tuple(int(s) for s in shape)})

    def tile_last(self, x: int, k: int) -> int:
        return forward_op(self, "tile_last", [x], {"k": int(k)})

    def gather_rows(self, x: int, index: np.ndarray) -> int:
        return forward_op(self, "gather_rows", [x], {"index": np.asarray(index, dtype=np.int64)})

    def segment_sum(self, x: int, segments: np.ndarray, num_segments: int) -> int:
        return forward_op(self, "segment_sum", [x], {"segments": np.asarray(segments, dtype=np.int64),
                                                     "num_segments": int(num_segments)})

    def cumsum(self, x: int, exclusive: bool = False) -> int:
        return forward_op(self, "cumsum", [x], {"exclusive": bool(exclusive)})


# ---------- Shape rules ----------

def _is_row_broadcast(a: np.ndarray, b: np.ndarray) -> bool:
    return a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]


def _check_binary(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or _is_row_broadcast(a, b):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Undo the row broadcast: sum a (n, m) gradient down to (m,)."""
    if g.shape == shape:
        return g
    return g.sum(axis=0)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int]) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


# ---------- Forward rules ----------

def _fwd_scale(xs, attrs):
    x, s = xs
    if s.size != 1:
        raise ShapeError(f"scale: second input must hold one value, got shape {s.shape}")
    return x * s.reshape(())


def _fwd_matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _fwd_reduce(fn):
    def run(xs, attrs):
        x = xs[0]
        axis = attrs.get("axis")
        if axis is not None and not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"reduce: axis {axis} out of range for shape {x.shape}")
        return np.asarray(fn(x, axis=axis))
    return run


def _fwd_sqrt(xs, attrs):
    x = xs[0]
    if np.any(x < 0):
        raise DomainError(f"sqrt: negative input (min {x.min():.3e}) in shape {x.shape}")
    return np.sqrt(x)


def _fwd_log(xs, attrs):
    x = xs[0]
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive input (min {x.min():.3e}) in shape {x.shape}")
    return np.log(x)


def _fwd_concat(xs, attrs):
    first = xs[0]
    for other in xs[1:]:
        if other.ndim != first.ndim or other.shape[:-1] != first.shape[:-1]:
            raise ShapeError(f"concat: incompatible shapes {first.shape} and {other.shape}")
    return np.concatenate(xs, axis=-1)


def _fwd_slice(xs, attrs):
    x = xs[0]
    start, stop = attrs["start"], attrs["stop"]
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for shape {x.shape}")
    return x[..., start:stop].copy()


def _fwd_dot(xs, attrs):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return np.einsum("...i,...i->...", a, b)


def _fwd_reshape(xs, attrs):
    x = xs[0]
    shape = attrs["shape"]
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")
    return x.reshape(shape).copy()


def _fwd_tile_last(xs, attrs):
    x = xs[0]
    return np.repeat(x[..., None], attrs["k"], axis=-1)


def _fwd_gather_rows(xs, attrs):
    x = xs[0]
    index = attrs["index"]
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    return x[index]


def _fwd_segment_sum(xs, attrs):
    x = xs[0]
    segments = attrs["segments"]
    if segments.shape[0] != x.shape[0]:
        raise ShapeError(f"segment_sum: {segments.shape[0]} segment ids for shape {x.shape}")
    out = np.zeros((attrs["num_segments"],) + x.shape[1:], dtype=DTYPE)
    np.add.at(out, segments, x)
    return out


def _fwd_cumsum(xs, attrs):
    x = xs[0]
    inclusive = np.cumsum(x, axis=-1)
    if attrs["exclusive"]:
        return inclusive - x
    return inclusive


def _softplus(x, beta):
    return np.logaddexp(0.0, beta * x) / beta


def _fwd_elementwise(op: str):
    def run(xs, attrs):
        a, b = xs
        _check_binary(op, a, b)
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        return a / b
    return run


_FORWARD: Dict[str, Callable[[List[np.ndarray], dict], np.ndarray]] = {
    "add": _fwd_elementwise("add"),
    "sub": _fwd_elementwise("sub"),
    "mul": _fwd_elementwise("mul"),
    "div": _fwd_elementwise("div"),
    "scale": _fwd_scale,
    "affine": lambda xs, a: xs[0] * a["scale"] + a["shift"],
    "matmul": _fwd_matmul,
    "sum": _fwd_reduce(np.sum),
    "mean": _fwd_reduce(np.mean),
    "abs": lambda xs, a: np.abs(xs[0]),
    "square": lambda xs, a: xs[0] * xs[0],
    "sqrt": _fwd_sqrt,
    "exp": lambda xs, a: np.exp(xs[0]),
    "log": _fwd_log,
    "sin": lambda xs, a: np.sin(xs[0]),
    "cos": lambda xs, a: np.cos(xs[0]),
    "sigmoid": lambda xs, a: expit(xs[0]),
    "softplus": lambda xs, a: _softplus(xs[0], a["beta"]),
    "maximum_const": lambda xs, a: np.maximum(xs[0], a["c"]),
    "clamp": lambda xs, a: np.clip(xs[0], a["lo"], a["hi"]),
    "concat": _fwd_concat,
    "slice": _fwd_slice,
    "norm": lambda xs, a: np.sqrt(np.einsum("...i,...i->...", xs[0], xs[0])),
    "dot": _fwd_dot,
    "reshape": _fwd_reshape,
    "tile_last": _fwd_tile_last,
    "gather_rows": _fwd_gather_rows,
    "segment_sum": _fwd_segment_sum,
    "cumsum": _fwd_cumsum,
}


# ---------- Backward rules ----------
# Each rule maps (upstream g, inputs, output, attrs) -> one gradient per input.

def _bwd_add(g, xs, out, attrs):
    a, b = xs
    return [g, _reduce_to(g, b.shape)]


def _bwd_sub(g, xs, out, attrs):
    a, b = xs
    return [g, -_reduce_to(g, b.shape)]


def _bwd_mul(g, xs, out, attrs):
    a, b = xs
    return [g * b, _reduce_to(g * a, b.shape)]


def _bwd_div(g, xs, out, attrs):
    a, b = xs
    return [g / b, _reduce_to(-g * a / (b * b), b.shape)]


def _bwd_scale(g, xs, out, attrs):
    x, s = xs
    return [g * s.reshape(()), np.asarray(np.sum(g * x)).reshape(s.shape)]


def _bwd_matmul(g, xs, out, attrs):
    a, b = xs
    return [g @ b.T, a.T @ g]


def _bwd_sum(g, xs, out, attrs):
    return [_expand_reduced(g, xs[0].shape, attrs.get("axis"))]


def _bwd_mean(g, xs, out, attrs):
    x = xs[0]
    axis = attrs.get("axis")
    count = x.size if axis is None else x.shape[axis]
    return [_expand_reduced(g, x.shape, axis) / count]


def _bwd_sqrt(g, xs, out, attrs):
    # zero subgradient at 0
    safe = np.where(out > 0, out, 1.0)
    return [np.where(out > 0, g / (2.0 * safe), 0.0)]


def _bwd_softplus(g, xs, out, attrs):
    return [g * expit(attrs["beta"] * xs[0])]


def _bwd_maximum_const(g, xs, out, attrs):
    # ties go to the non-constant branch
    return [np.where(xs[0] >= attrs["c"], g, 0.0)]


def _bwd_clamp(g, xs, out, attrs):
    x = xs[0]
    return [np.where((x >= attrs["lo"]) & (x <= attrs["hi"]), g, 0.0)]


def _bwd_concat(g, xs, out, attrs):
    grads, start = [], 0
    for x in xs:
        stop = start + x.shape[-1]
        grads.append(g[..., start:stop].copy())
        start = stop
    return grads


def _bwd_slice(g, xs, out, attrs):
    full = np.zeros_like(xs[0])
    full[..., attrs["start"]:attrs["stop"]] = g
    return [full]


def _bwd_norm(g, xs, out, attrs):
    x = xs[0]
    safe = np.where(out > 0, out, 1.0)[..., None]
    return [np.where(out[..., None] > 0, g[..., None] * x / safe, 0.0)]


def _bwd_dot(g, xs, out, attrs):
    a, b = xs
    return [g[..., None] * b, g[..., None] * a]


def _bwd_gather_rows(g, xs, out, attrs):
    full = np.zeros_like(xs[0])
    np.add.at(full, attrs["index"], g)
    return [full]


def _bwd_cumsum(g, xs, out, attrs):
    reverse = np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1)
    if attrs["exclusive"]:
        return [reverse - g]
    return [reverse]


_BACKWARD: Dict[str, Callable[..., List[np.ndarray]]] = {
    "add": _bwd_add,
    "sub": _bwd_sub,
    "mul": _bwd_mul,
    "div": _bwd_div,
    "scale": _bwd_scale,
    "affine": lambda g, xs, out, a: [g * a["scale"]],
    "matmul": _bwd_matmul,
    "sum": _bwd_sum,
    "mean": _bwd_mean,
    "abs": lambda g, xs, out, a: [g * np.sign(xs[0])],
    "square": lambda g, xs, out, a: [2.0 * g * xs[0]],
    "sqrt": _bwd_sqrt,
    "exp": lambda g, xs, out, a: [g * out],
    "log": lambda g, xs, out, a: [g / xs[0]],
    "sin": lambda g, xs, out, a: [g * np.cos(xs[0])],
    "cos": lambda g, xs, out, a: [-g * np.sin(xs[0])],
    "sigmoid": lambda g, xs, out, a: [g * out * (1.0 - out)],
    "softplus": _bwd_softplus,
    "maximum_const": _bwd_maximum_const,
    "clamp": _bwd_clamp,
    "concat": _bwd_concat,
    "slice": _bwd_slice,
    "norm": _bwd_norm,
    "dot": _bwd_dot,
    "reshape": lambda g, xs, out, a: [g.reshape(xs[0].shape)],
    "tile_last": lambda g, xs, out, a: [g.sum(axis=-1)],
    "gather_rows": _bwd_gather_rows,
    "segment_sum": lambda g, xs, out, a: [g[a["segments"]]],
    "cumsum": _bwd_cumsum,
}

SUPPORTED_OPS = tuple(sorted(_FORWARD))


# ---- MAIN FUNCTIONS ----
def forward_op(graph: DiffGraph, op: str, inputs: Sequence[int], attrs: Optional[dict] = None) -> int:
    """Append the result of `op` applied to `inputs` and return its node id."""
    if op not in _FORWARD:
        raise ValueError(f"Unknown op '{op}' (supported: {', '.join(SUPPORTED_OPS)})")
    attrs = dict(attrs or {})
    parents = tuple(int(i) for i in inputs)
    for pid in parents:
        if not 0 <= pid < len(graph.nodes):
            raise ValueError(f"{op}: input node {pid} does not exist")

    data = np.asarray(_FORWARD[op]([graph.nodes[p].data for p in parents], attrs), dtype=DTYPE)
    node = DiffValue(
        id=len(graph.nodes),
        shape=tuple(data.shape),
        data=data,
        op=op,
        parents=parents,
        attrs=attrs,
        requires_grad=any(graph.nodes[p].requires_grad for p in parents),
    )
    graph.nodes.append(node)
    return node.id


def backward(
    graph: DiffGraph,
    loss: int,
    *,
    only_required: bool = False,
    retain_intermediate: bool = True,
) -> Dict[int, np.ndarray]:
    """
    Reverse sweep from a scalar `loss` node.
    - Default: gradient for every node reachable from the loss
    - only_required: skip branches that lead to no parameter leaf
    - retain_intermediate=False: keep only leaf gradients (memory saver for training)
    """
    loss_node = graph.nodes[loss]
    if loss_node.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss_node.shape}")

    grads: Dict[int, np.ndarray] = {loss: np.ones(loss_node.shape, dtype=DTYPE)}

    for node in reversed(graph.nodes[: loss + 1]):
        g = grads.get(node.id)
        if g is None or not node.parents:
            continue
        if only_required and not node.requires_grad:
            continue

        inputs = [graph.nodes[p].data for p in node.parents]
        parent_grads = _BACKWARD[node.op](g, inputs, node.data, node.attrs)

        for pid, pg in zip(node.parents, parent_grads):
            if only_required and not graph.nodes[pid].requires_grad:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg

        if not retain_intermediate:
            del grads[node.id]

    return grads


def evaluate(build: Callable[..., int], *arrays: np.ndarray) -> np.ndarray:
    """Run `build(graph, *constant_ids)` on a throwaway graph and return the output value."""
    graph = DiffGraph()
    ids = [graph.constant(a) for a in arrays]
    return graph.value(build(graph, *ids)).copy()


def finite_difference_check(
    f: Callable[[DiffGraph, int], int],
    x: np.ndarray,
    step: float = 1e-4,
    denominator_floor: float = FD_DENOMINATOR_FLOOR,
) -> float:
    """
    Max relative error between the tape gradient and central differences.
    `f(graph, x_id)` must build a scalar loss from the parameter node `x_id`.
    """
    if step <= 0:
        raise ValueError(f"finite_difference_check: step must be positive, got {step}")
    x = np.array(x, dtype=DTYPE)

    graph = DiffGraph()
    xid = graph.parameter(x)
    loss = f(graph, xid)
    analytic = backward(graph, loss).get(xid, np.zeros_like(x))

    def value_at(point: np.ndarray) -> float:
        g = DiffGraph()
        v = float(g.value(f(g, g.parameter(point))).reshape(()))
        if not np.isfinite(v):
            raise ValueError(f"finite_difference_check: non-finite loss {v}")
        return v

    worst = 0.0
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus.flat[i] += step
        minus.flat[i] -= step
        central = (value_at(plus) - value_at(minus)) / (2.0 * step)
        err = abs(analytic.flat[i] - central) / (abs(central) + denominator_floor)
        worst = max(worst, err)

    logger.debug("finite_difference_check: %d coordinates, max relative error %.3e", x.size, worst)
    return worst
