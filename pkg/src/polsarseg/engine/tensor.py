"""Dense-tensor autodiff core.

A Tensor wraps a numpy array and, while gradients are enabled, records how it
was produced so that backward() can replay the tape in reverse topological
order.  Gradients accumulate additively across fan-out; the graph is released
after traversal.  float32 is the working precision, float64 is used by the
verification paths.

Elementwise operators (add, mul, relu, concat, softmax, sum) live here; the
structured image operators are in ops.py.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_grad_enabled = True

# Operation tape for FLOP instrumentation.  When a list is installed every
# engine op appends one geometry record; see analysis.instrument_flops.
_op_tape: list | None = None


def record(kind: str, **geom) -> None:
    if _op_tape is not None:
        _op_tape.append((kind, geom))


@contextmanager
def tape():
    """Collect (op, geometry) records for every engine op run in the body."""
    global _op_tape
    prev = _op_tape
    _op_tape = []
    try:
        yield _op_tape
    finally:
        _op_tape = prev


@contextmanager
def no_grad():
    """Disable graph recording in the body (inference / parameter updates)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-dimensional real array, optionally a node in a computation graph.

    Treat the value as immutable after creation.  The two sanctioned mutations
    are gradient accumulation during backward() and the documented in-place
    update of batch-norm running statistics in train mode.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _node(data: np.ndarray, parents: tuple["Tensor", ...], grad_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._grad_fn = grad_fn
        else:
            out._parents = ()
            out._grad_fn = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if not g.flags.owndata else g
        else:
            self.grad = self.grad + g

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum.  Tensor operands must have identical shapes; python
    scalars are broadcast as constants."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(
                f"add: operand shapes {a.shape} and {b.shape} differ"
            )
        record("add", numel=a.size)

        def grad_fn(g):
            return g, g

        return Tensor._node(a.data + b.data, (a, b), grad_fn)
    scalar = float(b)

    def grad_fn(g):
        return (g,)

    return Tensor._node(a.data + np.asarray(scalar, dtype=a.data.dtype), (a,), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; same shape rule as add."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(
                f"mul: operand shapes {a.shape} and {b.shape} differ"
            )
        ad, bd = a.data, b.data

        def grad_fn(g):
            return g * bd, g * ad

        return Tensor._node(ad * bd, (a, b), grad_fn)
    scalar = np.asarray(float(b), dtype=a.data.dtype)

    def grad_fn(g):
        return (g * scalar,)

    return Tensor._node(a.data * scalar, (a,), grad_fn)


def relu(x: Tensor) -> Tensor:
    record("relu", numel=x.size)
    mask = x.data > 0
    # multiply rather than select so non-finite inputs stay non-finite
    out = x.data * mask

    def grad_fn(g):
        return (g * mask,)

    return Tensor._node(out, (x,), grad_fn)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channel axis by default)."""
    if not tensors:
        raise UsageError("concat: empty tensor list")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != axis and t.shape[i] != base[i] for i in range(t.ndim)
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {base} off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._node(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn
    )


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Stable softmax along `axis`; outputs sum to 1 over that axis."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return Tensor._node(p, (x,), grad_fn)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    dtype = x.data.dtype

    def grad_fn(g):
        return (np.broadcast_to(np.asarray(g, dtype=dtype), shape),)

    return Tensor._node(np.asarray(x.data.sum(), dtype=dtype), (x,), grad_fn)


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient of a scalar.

    Populates .grad on every requires_grad leaf reachable from `loss`,
    accumulating additively across fan-out, then drops all graph edges so the
    intermediate tensors can be collected.
    """
    if loss.size != 1:
        raise UsageError(
            f"backward: loss must be scalar, got shape {loss.shape}"
        )
    if not loss.requires_grad:
        return

    # Iterative postorder: recursion would overflow on deep networks.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        fn = node._grad_fn
        if fn is None:
            continue
        grads = fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None and parent.requires_grad:
                parent._accumulate(np.asarray(g, dtype=parent.data.dtype))
        # release the edge and the non-leaf accumulator
        node._parents = ()
        node._grad_fn = None
        node.grad = None
