"""
Reverse-mode automatic differentiation over small dense numpy tensors.

Each primitive computes its forward value with numpy and registers a backward
rule mapping the output gradient to one gradient per parent. Non-leaf tensors
are recorded on the active Tape in creation order, which is a topological
order, so ``backward`` walks the tape in reverse and visits every node once.
"""

from dataclasses import dataclass
import logging
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, logsumexp as _np_logsumexp

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12

_local = threading.local()


class Tape:
    """Ordered record of primitive applications; use as a context manager."""

    def __init__(self):
        self.nodes: list["Tensor"] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tapes.pop()
        return False


def current_tape() -> Optional[Tape]:
    """Innermost active tape of this thread, if any."""
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: "Tensor", b: "Tensor", op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ValueError(f"Shape mismatch in {op}: {a.shape} vs {b.shape}") from e


class Tensor:
    """A float64 array with an optional gradient and the rule that produced it."""

    # Makes ndarray <op> Tensor dispatch to the Tensor reflected operators
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None
        self._op = "leaf"

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return gather(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents: Sequence[Tensor], rule: Callable[[np.ndarray], tuple], op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out._op = op
        tape = current_tape()
        if tape is not None:
            tape.record(out)
    return out


# Elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    return _node(a.data / b.data, (a, b),
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)), "div")


def scale(a, c: float) -> Tensor:
    """Multiply by a constant."""
    a = as_tensor(a)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a) -> Tensor:
    return scale(a, -1.0)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ValueError(f"Shape mismatch in matmul: {a.shape} @ {b.shape}")

    def rule(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return g @ b.data.T, np.outer(a.data, g)
        if a.ndim == 2:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _node(a.data @ b.data, (a, b), rule, "matmul")


# Elementwise unary ops

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    """Natural log with the input clamped at 1e-12; zero gradient below the clamp."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_CLAMP)
    active = a.data >= LOG_CLAMP
    return _node(np.log(clamped), (a,), lambda g: (np.where(active, g / clamped, 0.0),), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / np.maximum(out, LOG_CLAMP),), "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),), "relu")


def atan(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.arctan(a.data), (a,), lambda g: (g / (1.0 + a.data * a.data),), "atan")


def maximum(a, c: float) -> Tensor:
    """max(a, c) against a constant; the gradient passes where a >= c."""
    a = as_tensor(a)
    gate = a.data >= c
    return _node(np.maximum(a.data, c), (a,), lambda g: (g * gate,), "maximum")


def minimum(a, c: float) -> Tensor:
    a = as_tensor(a)
    gate = a.data <= c
    return _node(np.minimum(a.data, c), (a,), lambda g: (g * gate,), "minimum")


def detach(a) -> Tensor:
    """Copy of the value with no gradient connection."""
    return Tensor(as_tensor(a).data.copy())


# Reductions and structure

def _expand(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def gather(a, index) -> Tensor:
    """Index or gather; the gradient scatters back to the source positions only."""
    a = as_tensor(a)

    def rule(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _node(a.data[index], (a,), rule, "gather")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat requires at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ValueError(f"Shape mismatch in concat: {[t.shape for t in tensors]}") from e
    return _node(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _np_logsumexp(a.data, axis=axis, keepdims=True)

    def rule(g):
        g = g if keepdims else np.expand_dims(g, axis)
        return (g * np.exp(a.data - out),)

    return _node(out if keepdims else np.squeeze(out, axis=axis), (a,), rule, "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), K))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# Backward pass

def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, tape: Optional[Tape] = None) -> list[Tensor]:
    """
    Propagate d(root)/d(node) to every tensor that requires a gradient.

    Leaf gradients accumulate additively into ``.grad`` across calls;
    intermediate gradients are reset on every call.

    Args:
        root: Scalar output tensor
        tape: Tape the graph was recorded on; without one the graph is
            ordered by a depth-first search from the root

    Returns:
        The leaf tensors that received a gradient
    """
    if root.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
    nodes = tape.nodes if tape is not None else [n for n in _topological_order(root) if not n.is_leaf]
    if not root.is_leaf and root not in nodes:
        raise ValueError("Root tensor was not recorded on the given tape")

    for node in nodes:
        node.grad = None
    if not root.requires_grad:
        return []
    if root.is_leaf:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0
        return [root]
    root.grad = np.ones_like(root.data)

    leaves = {}
    for node in reversed(nodes):
        if node.grad is None:
            continue
        for parent, g in zip(node._parents, node._backward(node.grad)):
            if g is None or not parent.requires_grad:
                continue
            g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
            if parent.is_leaf:
                leaves[id(parent)] = parent
    return list(leaves.values())


@dataclass
class GradCheckReport:
    """Outcome of a central-difference gradient check."""

    max_rel_error: float
    max_abs_error: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5, tol: float = 1e-4,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """
    Compare the reverse-mode gradient of a scalar function with central differences.

    A coordinate passes when |analytic - numeric| <= max(tol * max(|analytic|, |numeric|), abs_floor).

    Args:
        f: Function from a Tensor to a scalar Tensor
        point: Evaluation point
        h: Finite-difference step
        tol: Relative tolerance
        abs_floor: Absolute tolerance floor for near-zero gradients
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point, requires_grad=True)
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic = np.zeros_like(point) if x.grad is None else x.grad

    numeric = np.zeros_like(point)
    flat = numeric.reshape(-1)
    for i in range(point.size):
        plus, minus = point.copy(), point.copy()
        plus.reshape(-1)[i] += h
        minus.reshape(-1)[i] -= h
        flat[i] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)

    abs_err = np.abs(analytic - numeric)
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    rel_err = abs_err / np.maximum(magnitude, np.finfo(float).tiny)
    passed = bool(np.all(abs_err <= np.maximum(tol * magnitude, abs_floor)))
    report = GradCheckReport(max_rel_error=float(rel_err.max(initial=0.0)),
                             max_abs_error=float(abs_err.max(initial=0.0)),
                             passed=passed, analytic=analytic, numeric=numeric)
    if not passed:
        logger.debug(f"grad_check failed: max abs error {report.max_abs_error:.3e}")
    return report
