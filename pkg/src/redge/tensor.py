"""Dense float64 matrices with a minimal reverse-mode autodiff tape.

All values are 2-D numpy arrays (scalars are 1x1, row vectors 1xK).  A
:class:`Tape` owns an append-only list of :class:`Node` objects.  Interior
nodes keep, per parent, a closure that maps the output cotangent to that
parent's cotangent; :meth:`Tape.backward` walks the node list in reverse
insertion order exactly once, so two backward passes over the same tape
produce bitwise-identical gradients.

``detach()`` creates a node with the same value but no parents: upstream of
it the graph behaves as if the value were a constant (stop-gradient).

Tapes are confined to one logical thread; values are never mutated after a
node is created, so they can be shared freely across threads.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "as_matrix",
    "stable_softmax",
    "softmax_rows",
    "linear_op",
    "finite_diff_gradient",
    "jacobian",
    "grad_or_zero",
]

# exp() underflows to zero a bit below -745; clamping shifted logits there
# keeps softmax rows strictly positive even for extreme logit gaps.
_EXP_FLOOR = -745.0


def as_matrix(value) -> np.ndarray:
    """Coerce a scalar, sequence, or array into a 2-D float64 array."""
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _row_max(x: np.ndarray) -> np.ndarray:
    """Per-row max as an (L, 1) column; column-wise for small K (fast path)."""
    if x.shape[1] > 16:
        return x.max(axis=1, keepdims=True)
    m = x[:, 0].copy()
    for k in range(1, x.shape[1]):
        np.maximum(m, x[:, k], out=m)
    return m[:, None]


def _row_total(x: np.ndarray) -> np.ndarray:
    """Per-row sum as an (L, 1) column; column-wise for small K (fast path)."""
    if x.shape[1] > 16:
        return x.sum(axis=1, keepdims=True)
    s = x[:, 0].copy()
    for k in range(1, x.shape[1]):
        s += x[:, k]
    return s[:, None]


def stable_softmax(x) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Rows of the result are strictly positive and sum to one.  Shifted
    arguments are clamped at the exp() underflow threshold so no row can
    collapse to all zeros.
    """
    x = as_matrix(x)
    z = x - _row_max(x)
    np.maximum(z, _EXP_FLOOR, out=z)
    np.exp(z, out=z)
    z /= _row_total(z)
    return z


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _identity_vjp(g):
    return g


def _neg_vjp(g):
    return -g


class Node:
    """One tape entry: a value plus vector-Jacobian closures into its parents."""

    __slots__ = ("tape", "index", "value", "parents", "requires_grad", "grad", "name")

    # Make numpy defer to the reflected Node operators instead of coercing.
    __array_ufunc__ = None

    def __init__(self, tape, index, value, parents, requires_grad, name=None):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # -- construction helpers ------------------------------------------------

    def _coerce(self, other) -> "Node":
        if isinstance(other, Node):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        arr = np.asarray(other, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full(self.value.shape, float(arr))
        return self.tape.constant(arr)

    def _unary(self, value, vjp) -> "Node":
        return self.tape._record(value, ((self, vjp),))

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = self._coerce(other)
        _check_same_shape(self.value, other.value)
        return self.tape._record(
            self.value + other.value,
            ((self, _identity_vjp), (other, _identity_vjp)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        _check_same_shape(self.value, other.value)
        return self.tape._record(
            self.value - other.value,
            ((self, _identity_vjp), (other, _neg_vjp)),
        )

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __neg__(self):
        return self._unary(-self.value, _neg_vjp)

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            c = float(other)
            return self._unary(self.value * c, lambda g: g * c)
        other = self._coerce(other)
        _check_same_shape(self.value, other.value)
        a, b = self.value, other.value
        return self.tape._record(
            a * b,
            ((self, lambda g: g * b), (other, lambda g: g * a)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self * (1.0 / float(other))
        other = self._coerce(other)
        return self * other.pow(-1.0)

    def __pow__(self, p):
        return self.pow(p)

    def pow(self, p: float) -> "Node":
        """Elementwise power x**p; fractional p requires non-negative input."""
        p = float(p)
        x = self.value
        if p != round(p) and np.any(x < 0.0):
            raise ValueError(f"pow({p}): negative input with fractional exponent")
        out = np.power(x, p)

        def vjp(g, x=x, p=p):
            return g * p * np.power(x, p - 1.0)

        return self._unary(out, vjp)

    def exp(self) -> "Node":
        out = np.exp(self.value)
        return self._unary(out, lambda g: g * out)

    def log(self) -> "Node":
        x = self.value
        if np.any(x <= 0.0):
            raise ValueError("log of non-positive input")
        return self._unary(np.log(x), lambda g: g / x)

    def sqrt(self) -> "Node":
        x = self.value
        if np.any(x <= 0.0):
            raise ValueError("sqrt of non-positive input")
        out = np.sqrt(x)
        return self._unary(out, lambda g: g / (2.0 * out))

    def abs(self) -> "Node":
        x = self.value
        return self._unary(np.abs(x), lambda g: g * np.sign(x))

    def clamp_min(self, c: float) -> "Node":
        """Elementwise max(x, c); gradient vanishes on clamped entries."""
        x = self.value
        c = float(c)
        mask = (x > c).astype(np.float64)
        return self._unary(np.maximum(x, c), lambda g: g * mask)

    # -- reductions and shape ops ------------------------------------------

    def sum(self) -> "Node":
        shape = self.value.shape
        out = np.array([[self.value.sum()]])
        return self._unary(out, lambda g: np.full(shape, g[0, 0]))

    def row_sum(self) -> "Node":
        shape = self.value.shape
        out = _row_total(self.value)
        return self._unary(out, lambda g: np.repeat(g, shape[1], axis=1))

    def dot(self, other) -> "Node":
        """Frobenius inner product; returns a 1x1 node."""
        other = self._coerce(other)
        _check_same_shape(self.value, other.value)
        a, b = self.value, other.value
        out = np.array([[float((a * b).sum())]])
        return self.tape._record(
            out,
            ((self, lambda g: g[0, 0] * b), (other, lambda g: g[0, 0] * a)),
        )

    def broadcast_row(self, rows: int) -> "Node":
        """Tile a 1xK row vector into rows x K."""
        if self.value.shape[0] != 1:
            raise ValueError(f"broadcast_row expects a 1xK node, got {self.value.shape}")
        out = np.broadcast_to(self.value, (rows, self.value.shape[1])).copy()
        return self._unary(out, lambda g: g.sum(axis=0, keepdims=True))

    def broadcast_col(self, cols: int) -> "Node":
        """Tile an Lx1 column vector into L x cols."""
        if self.value.shape[1] != 1:
            raise ValueError(f"broadcast_col expects an Lx1 node, got {self.value.shape}")
        out = np.broadcast_to(self.value, (self.value.shape[0], cols)).copy()
        return self._unary(out, lambda g: g.sum(axis=1, keepdims=True))

    @property
    def T(self) -> "Node":
        return self._unary(self.value.T.copy(), lambda g: g.T)

    def reshape(self, rows: int, cols: int) -> "Node":
        shape = self.value.shape
        if rows * cols != self.value.size:
            raise ValueError(f"cannot reshape {shape} to {(rows, cols)}")
        return self._unary(self.value.reshape(rows, cols).copy(), lambda g: g.reshape(shape))

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self.value, other.value
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        return self.tape._record(
            a @ b,
            ((self, lambda g: g @ b.T), (other, lambda g: a.T @ g)),
        )

    def __rmatmul__(self, other):
        return self._coerce(other).__matmul__(self)

    def detach(self) -> "Node":
        """Same value, zero gradient flow."""
        return self.tape._record(self.value, ())

    def softmax_rows(self) -> "Node":
        return softmax_rows(self)


def softmax_rows(x: Node) -> Node:
    """Row-stochastic softmax node; backward applies diag(p) - p p^T per row."""
    p = stable_softmax(x.value)

    def vjp(g, p=p):
        return p * (g - _row_total(p * g))

    return x.tape._record(p, ((x, vjp),))


def linear_op(x: Node, forward: Callable, adjoint: Callable) -> Node:
    """Custom linear map with an explicit adjoint for the backward pass.

    ``forward`` and ``adjoint`` must be a true adjoint pair,
    <g, forward(x)> == <adjoint(g), x> for all g, x.
    """
    out = as_matrix(forward(x.value))

    def vjp(g):
        return as_matrix(adjoint(g))

    return x.tape._record(out, ((x, vjp),))


class Tape:
    """Append-only record of one differentiable computation.

    A tape is built once per estimation call and never reused across calls.
    Leaves created with a ``name`` can be looked up afterwards to read their
    gradients (used for auxiliary parameters threaded through objectives).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.named: dict[str, Node] = {}

    def lift(self, value, requires_grad: bool = False, name: str | None = None) -> Node:
        arr = as_matrix(value).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError("lift: non-finite input rejected")
        node = Node(self, len(self.nodes), arr, (), bool(requires_grad), name)
        self.nodes.append(node)
        if name is not None:
            if name in self.named:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.named[name] = node
        return node

    def constant(self, value) -> Node:
        return self.lift(value, requires_grad=False)

    def _record(self, value, parents) -> Node:
        live = tuple((p, vjp) for p, vjp in parents if p.requires_grad)
        node = Node(self, len(self.nodes), np.asarray(value, dtype=np.float64), live, bool(live))
        self.nodes.append(node)
        return node

    def zero_grads(self) -> None:
        for node in self.nodes:
            node.grad = None

    def backward(self, output: Node, seed=None) -> None:
        """Reverse-mode pass from ``output``; clears previous gradients first.

        Without an explicit ``seed`` the output must be scalar (1x1).
        """
        if output.tape is not self:
            raise ValueError("output node belongs to a different tape")
        if seed is None:
            if output.value.shape != (1, 1):
                raise ValueError(f"backward: non-scalar output of shape {output.value.shape}")
            seed = np.ones((1, 1))
        else:
            seed = as_matrix(seed)
            if seed.shape != output.value.shape:
                raise ValueError("backward: seed shape must match output shape")
        self.zero_grads()
        output.grad = seed
        for node in reversed(self.nodes[: output.index + 1]):
            g = node.grad
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib

    def named_grads(self) -> dict[str, np.ndarray]:
        return {
            name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in self.named.items()
        }


def grad_or_zero(node: Node) -> np.ndarray:
    return node.grad if node.grad is not None else np.zeros_like(node.value)


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, O(h^2) accurate."""
    if h <= 0.0:
        raise ValueError("finite differences require h > 0")
    x = as_matrix(x)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"objective non-finite near perturbed point {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def jacobian(output: Node, leaf: Node) -> np.ndarray:
    """Full Jacobian d output / d leaf via one backward pass per output entry.

    Debug/oracle accessor: materializes the (output.size x leaf.size) matrix,
    so keep it to small shapes.
    """
    tape = output.tape
    m, n = output.value.size, leaf.value.size
    jac = np.zeros((m, n))
    for i in range(m):
        seed = np.zeros_like(output.value)
        seed.flat[i] = 1.0
        tape.backward(output, seed=seed)
        if leaf.grad is not None:
            jac[i] = leaf.grad.ravel()
    return jac
