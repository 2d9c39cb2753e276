"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a :class:`Node` on the dynamic graph when any input
requires a gradient.  Backward rules are themselves written in terms of
:class:`Tensor` operations, so running them with graph recording enabled
(``create_graph=True``) yields differentiable gradients.  That second-order
path is what the R1 penalty needs.

Broadcasting is deliberately limited to scalar-with-tensor and equal shapes.
Row/axis expansion is an explicit op (:func:`expand`) so that every backward
rule stays a one-liner.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "DimensionError",
    "BackwardError",
    "SecondOrderError",
    "no_grad",
    "is_grad_enabled",
    "grad",
    "grad_of_grad",
    "matmul",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "square",
    "power",
    "reduce_sum",
    "reduce_mean",
    "expand",
    "take_rows",
    "concat",
    "slice_cols",
    "custom_op",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised for invalid calls to backward (non-scalar loss, consumed graph)."""


class SecondOrderError(RuntimeError):
    """Raised when a graph with create_graph=True hits a first-order-only op."""


_GRAD_ENABLED = True
_ids = itertools.count()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Context manager disabling graph recording."""
    return _grad_mode(False)


class Node:
    """One recorded operation: its inputs and a rule mapping dL/dout to dL/dinputs."""

    __slots__ = ("op", "inputs", "rule", "second_order", "consumed", "id")

    def __init__(self, op: str, inputs: tuple, rule: Callable, second_order: bool = True):
        self.op = op
        self.inputs = inputs
        self.rule = rule
        self.second_order = second_order
        self.consumed = False
        self.id = next(_ids)


class Tensor:
    """A dense row-major float64 array with an optional gradient buffer.

    ``data`` is an ndarray whose flat view is available as :attr:`values`.
    Leaves created by the user carry ``requires_grad``; results of operations
    carry a reference to the :class:`Node` that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise BackwardError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self.node is None:
            if not self.requires_grad:
                raise BackwardError("loss was not produced on the tape")
            self._accumulate(np.ones_like(self.data))
            return
        grads = _run_backward([self], [Tensor(np.ones_like(self.data))], create_graph=False,
                              retain_graph=retain_graph)
        for leaf, g in grads.items():
            leaf._accumulate(g.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, inputs: tuple, rule: Callable, second_order: bool = True) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, rule, second_order)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _fit(g: Tensor, like: Tensor) -> Tensor:
    """Reduce a gradient back to a scalar operand's shape."""
    if like.ndim == 0 and g.ndim != 0:
        return reduce_sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, "add", (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (_fit(g, a), _fit(neg(g), b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    def rule(g):
        return (_fit(g * b, a) if a.requires_grad else None,
                _fit(g * a, b) if b.requires_grad else None)

    return _result(a.data * b.data, "mul", (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")

    def rule(g):
        ga = g / b
        return _fit(ga, a), _fit(neg(ga * a / b), b)

    return _result(a.data / b.data, "div", (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (neg(g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (no gradient for ``c``)."""
    c = float(c)
    return _result(a.data * c, "scale", (a,), lambda g: (scale(g, c),))


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, "square", (a,), lambda g: (g * scale(a, 2.0),))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 2.0:
        return square(a)
    return _result(np.power(a.data, p), "power", (a,), lambda g: (g * scale(power(a, p - 1.0), p),))


def exp(a: Tensor) -> Tensor:
    return _result(np.exp(a.data), "exp", (a,), lambda g: (g * exp(a),))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a,))


def tanh(a: Tensor) -> Tensor:
    def rule(g):
        y = tanh(a)
        return (g * (1.0 - y * y),)

    return _result(np.tanh(a.data), "tanh", (a,), rule)


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    def rule(g):
        s = sigmoid(a)
        return (g * s * (1.0 - s),)

    return _result(_np_sigmoid(a.data), "sigmoid", (a,), rule)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated stably."""
    return _result(np.logaddexp(0.0, a.data), "softplus", (a,), lambda g: (g * sigmoid(a),))


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = (a.data > 0).astype(np.float64)
    return _result(a.data * mask, "relu", (a,), lambda g: (g * Tensor(mask),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = np.where(a.data > 0, 1.0, slope)
    return _result(a.data * mask, "leaky_relu", (a,), lambda g: (g * Tensor(mask),))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    def rule(g):
        # skip the product for operands that need no gradient (e.g. data batches)
        return (g @ transpose(b) if a.requires_grad else None,
                transpose(a) @ g if b.requires_grad else None)

    return _result(a.data @ b.data, "matmul", (a, b), rule)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` with ``b`` added to every row, as a single graph node."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"affine: shapes {x.shape} @ {W.shape} + {b.shape} do not fit")

    def rule(g):
        return (g @ transpose(W) if x.requires_grad else None,
                transpose(x) @ g if W.requires_grad else None,
                reduce_sum(g, axis=0) if b.requires_grad else None)

    return _result(x.data @ W.data + b.data, "affine", (x, W, b), rule)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _result(a.data.T, "transpose", (a,), lambda g: (transpose(g),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _result(data, "reshape", (a,), lambda g: (reshape(g, old),))


def _check_axis(a: Tensor, axis: Optional[int]) -> None:
    if axis is not None and not (0 <= axis < a.ndim):
        raise DimensionError(f"invalid axis {axis} for shape {a.shape}")


def reduce_sum(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis)
    if axis is None:
        shape = a.shape
        return _result(np.asarray(a.data.sum()), "sum", (a,), lambda g: (expand(g, shape),))
    return _result(a.data.sum(axis=axis), "sum", (a,), lambda g: (expand(g, a.shape, axis=axis),))


def reduce_mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    _check_axis(a, axis)
    count = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def expand(a: Tensor, shape: tuple, axis: Optional[int] = None) -> Tensor:
    """Broadcast a scalar to ``shape``, or insert ``axis`` into ``a`` to reach ``shape``.

    This is the only non-trivial broadcast in the library; its backward is a
    sum over the expanded axis, so it pairs with :func:`reduce_sum`.
    """
    shape = tuple(shape)
    if axis is None:
        if a.ndim != 0:
            raise DimensionError(f"expand without axis needs a scalar, got shape {a.shape}")
        return _result(np.full(shape, a.data.item()), "expand", (a,), lambda g: (reduce_sum(g),))
    expected = shape[:axis] + shape[axis + 1:]
    if a.shape != expected:
        raise DimensionError(f"expand: shape {a.shape} cannot fill {shape} along axis {axis}")
    data = np.ascontiguousarray(np.broadcast_to(np.expand_dims(a.data, axis), shape))
    return _result(data, "expand", (a,), lambda g: (reduce_sum(g, axis),))


def take_rows(table: Tensor, idx: ArrayLike) -> Tensor:
    """Row lookup ``table[idx]``; the gradient scatters back into the looked-up rows."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    return _result(table.data[idx], "take_rows", (table,), lambda g: (_scatter_rows(g, idx, n),))


def _scatter_rows(g: Tensor, idx: np.ndarray, n: int) -> Tensor:
    if g.ndim == 2 and n <= 4096:
        # one-hot product; np.add.at is an order of magnitude slower here
        out = (idx[None, :] == np.arange(n)[:, None]).astype(np.float64) @ g.data
    else:
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g.data)
    return _result(out, "scatter_rows", (g,), lambda gg: (take_rows(gg, idx),))


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise DimensionError(f"slice_cols [{start}:{stop}] invalid for shape {a.shape}")
    width = a.shape[1]
    return _result(np.ascontiguousarray(a.data[:, start:stop]), "slice_cols", (a,),
                   lambda g: (_pad_cols(g, start, width),))


def _pad_cols(g: Tensor, start: int, width: int) -> Tensor:
    out = np.zeros((g.shape[0], width))
    stop = start + g.shape[1]
    out[:, start:stop] = g.data
    return _result(out, "pad_cols", (g,), lambda gg: (slice_cols(gg, start, stop),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate matrices along columns (axis=1) or rows (axis=0)."""
    tensors = [_as_tensor(t) for t in tensors]
    if axis not in (0, 1) or any(t.ndim != 2 for t in tensors):
        raise DimensionError("concat supports matrices along axis 0 or 1")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise DimensionError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        if axis == 1:
            return tuple(slice_cols(g, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))
        gt = transpose(g)
        return tuple(transpose(slice_cols(gt, int(lo), int(hi))) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), rule)


def primitive(name: str, inputs: Sequence[Tensor], out: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Attach a hand-written numpy backward to an already computed ``out``.

    ``backward(g)`` returns one array (or ``None``) per input.  This is the
    closure-based sibling of :func:`custom_op` for fused kernels that reuse
    forward intermediates; it is likewise first-order only.
    """
    inputs = tuple(_as_tensor(t) for t in inputs)

    def rule(g):
        return tuple(None if x is None else Tensor(x) for x in backward(g.data))

    return _result(np.asarray(out, dtype=np.float64), name, inputs, rule, second_order=False)


def custom_op(name: str, forward: Callable[..., np.ndarray],
              backward: Callable[..., Sequence[np.ndarray]]) -> Callable[..., Tensor]:
    """Wrap a numpy forward/backward pair as a first-order-only op.

    ``backward(g, *input_arrays)`` returns one array per input.  Graphs that
    contain such an op cannot be differentiated twice.
    """

    def apply(*inputs: Tensor) -> Tensor:
        inputs = tuple(_as_tensor(t) for t in inputs)
        arrays = [t.data for t in inputs]

        def rule(g):
            return tuple(Tensor(x) for x in backward(g.data, *arrays))

        return _result(np.asarray(forward(*arrays), dtype=np.float64), name, inputs, rule, second_order=False)

    return apply


# ---------------------------------------------------------------------------
# engine
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def frozen(tensors: Iterable[Tensor]):
    """Temporarily treat ``tensors`` as constants.

    Gradient rules consult ``requires_grad`` when backward runs, so the
    backward pass must happen inside the block as well.
    """
    tensors = [t for t in tensors if t.requires_grad]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t in tensors:
            t.requires_grad = True


def _topo_order(roots: Iterable[Tensor]) -> list:
    """Tensors with nodes, each after all tensors it depends on."""
    order, seen = [], set()
    for root in roots:
        if root.node is None or id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                if inp.node is not None and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def _run_backward(outputs: Sequence[Tensor], seeds: Sequence[Tensor], create_graph: bool,
                  retain_graph: bool, capture: Sequence[Tensor] = ()) -> dict:
    """Propagate seeds through the graph.

    Returns ``{tensor: grad Tensor}`` for every reachable leaf plus every
    tensor listed in ``capture``.
    """
    order = _topo_order(outputs)
    for t in order:
        if t.node.consumed:
            raise BackwardError("graph already consumed by a previous backward(); "
                                "re-run the forward pass or pass retain_graph=True")
    grads: dict = {}
    keep = {id(t): t for t in capture}
    for out, seed in zip(outputs, seeds):
        if out.node is None and out.requires_grad:
            keep[id(out)] = out
        grads[id(out)] = grads[id(out)] + seed if id(out) in grads else seed
    with _grad_mode(create_graph):
        for t in reversed(order):
            node = t.node
            if not retain_graph:
                node.consumed = True
            g = grads.get(id(t)) if id(t) in keep else grads.pop(id(t), None)
            if g is None:
                continue
            if create_graph and not node.second_order:
                raise SecondOrderError(f"op '{node.op}' has no second-order rule")
            for inp, gi in zip(node.inputs, node.rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp.node is None:
                    keep[key] = inp
    return {keep[k]: grads[k] for k in keep if k in grads}


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False,
         retain_graph: Optional[bool] = None) -> list:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    Unlike :meth:`Tensor.backward`, nothing is written to ``.grad``.  With
    ``create_graph=True`` the returned tensors are themselves on the graph.
    Inputs that do not influence ``output`` get a zero tensor.
    """
    if output.data.size != 1:
        raise BackwardError(f"grad() needs a scalar output, got shape {output.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    inputs = list(inputs)
    found = _run_backward([output], [Tensor(np.ones_like(output.data))], create_graph,
                          retain_graph, capture=inputs)
    by_id = {id(t): g for t, g in found.items()}
    return [by_id.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]


def grad_of_grad(scalar_fn: Callable[[Tensor], Tensor], x: Tensor, params: Sequence[Tensor]) -> list:
    """Gradient of ``||d scalar_fn(x) / dx||^2`` with respect to ``params``.

    ``scalar_fn`` must return a scalar built from ops with second-order rules.
    """
    x = x if x.requires_grad else Tensor(x.data, requires_grad=True)
    out = scalar_fn(x)
    (gx,) = grad(out, [x], create_graph=True)
    sq = reduce_sum(square(gx))
    if sq.node is None:
        return [np.zeros_like(p.data) for p in params]
    return [g.data for g in grad(sq, params)]


def broadcast_rows(v: Tensor, n: int) -> Tensor:
    """Repeat a vector as ``n`` rows (bias add)."""
    return expand(v, (n,) + v.shape, axis=0)


def broadcast_cols(v: Tensor, n: int) -> Tensor:
    """Repeat a length-b vector as ``n`` columns, giving shape (b, n)."""
    return expand(v, v.shape + (n,), axis=1)
