"""Dense float64 tensors of rank <= 2 with a reverse-mode gradient tape.

The tape records every primitive operation in creation order, which is a
valid topological order because results are only built from values that
already exist. ``Tape.backward`` walks the records in reverse and
accumulates vector-Jacobian products into each input's gradient slot.

Only the primitives the training objective needs are provided: add,
multiply, matmul, transpose, sum, elementwise nonlinearities, reciprocal,
and a fused Cholesky solve + log-determinant for symmetric positive
definite systems.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve, ldl
from scipy.special import expit

from .exceptions import DimensionError, NumericalError

Array = np.ndarray

# Relative jitter schedule for barely-indefinite Cholesky inputs.
_JITTER_START = 1e-8
_JITTER_MAX = 1e-2


def jittered_cholesky(a: Array) -> Array:
    """Lower Cholesky factor of ``a``, adding escalating diagonal jitter.

    Jitter starts at 1e-8 * mean(diag(a)) and grows tenfold up to
    1e-2 * mean(diag(a)). Raises NumericalError naming the smallest
    pivot if the matrix is still not positive definite after that.
    """
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(a)))
    if not np.isfinite(scale) or scale <= 0.0:
        scale = 1.0
    eye = np.eye(a.shape[0])
    jitter = _JITTER_START
    while jitter <= _JITTER_MAX:
        try:
            return np.linalg.cholesky(a + (jitter * scale) * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    _, d, _ = ldl(a)
    smallest = float(np.min(np.diag(d)))
    raise NumericalError(
        f"matrix not positive definite after jitter escalation "
        f"(smallest pivot {smallest:.6e})"
    )


def _as_value(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 2:
        raise DimensionError(f"rank-{arr.ndim} tensors are not supported (max rank 2)")
    return arr


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Immutable value node on a tape, with an optional gradient slot."""

    __slots__ = ("value", "tape", "requires_grad", "grad", "name", "_parents")

    def __init__(self, value: Array, tape: "Tape", requires_grad: bool,
                 parents=(), name: str = ""):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self.name = name
        self._parents = parents  # tuple of (parent Tensor, vjp callable)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self.requires_grad and not self._parents

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError("item() requires a single-element tensor")
        return float(self.value)

    def __repr__(self) -> str:  # pragma: no cover
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.shape})"

    # -- operator sugar; python scalars fold into closures, tensors must share the tape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, negate(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(negate(self), other)

    def __neg__(self):
        return negate(self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, reciprocal(other))
        return multiply(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return multiply(total(self), 1.0 / self.value.size)

    def elu(self) -> "Tensor":
        return elu(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


class Tape:
    """Ordered record of primitive ops; not shareable across threads.

    With ``check_finite`` every op validates that its result is finite,
    at a small cost; training leaves it off and relies on the per-step
    loss check instead.
    """

    def __init__(self, check_finite: bool = False):
        self._nodes: list[Tensor] = []
        self.check_finite = check_finite

    def _register(self, value: Array, requires_grad: bool, parents=(),
                  name: str = "") -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite result in op '{name or 'unnamed'}'")
        node = Tensor(value, self, requires_grad, parents, name)
        self._nodes.append(node)
        return node

    def leaf(self, data, name: str = "") -> Tensor:
        """Register a differentiable input (weights, hyperparameters)."""
        return self._register(_as_value(data), True, name=name or "leaf")

    def constant(self, data, name: str = "") -> Tensor:
        """Register a non-differentiable input (data matrices, fixed scalars)."""
        return self._register(_as_value(data), False, name=name or "const")

    def leaves(self) -> list[Tensor]:
        return [n for n in self._nodes if n.is_leaf]

    def backward(self, root: Tensor) -> dict[Tensor, Array]:
        """Accumulate gradients of ``root`` into every node reached from it.

        Returns a mapping from each leaf to its gradient (zeros if the
        leaf does not influence ``root``).
        """
        if root.tape is not self:
            raise ValueError("root tensor does not belong to this tape")
        if root.value.size != 1:
            raise ValueError("backward requires a scalar root")
        for node in self._nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes):
            if node.grad is None or not node._parents:
                continue
            out_grad = node.grad
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                contribution = vjp(out_grad)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution
        return {
            leaf: leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
            for leaf in self.leaves()
        }


def backward(tape: Tape, root: Tensor) -> dict[Tensor, Array]:
    """Functional alias for ``tape.backward(root)``."""
    return tape.backward(root)


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands belong to different tapes")
    return tape


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        tape = _tape_of(a, b)
        value = a.value + b.value
        a_shape, b_shape = a.value.shape, b.value.shape
        parents = (
            (a, lambda g: _unbroadcast(g, a_shape)),
            (b, lambda g: _unbroadcast(g, b_shape)),
        )
        grad = a.requires_grad or b.requires_grad
        return tape._register(value, grad, parents, "add")
    scalar = float(b)
    a_shape = a.value.shape
    return a.tape._register(
        a.value + scalar, a.requires_grad,
        ((a, lambda g: _unbroadcast(g, a_shape)),), "add")


def negate(a: Tensor) -> Tensor:
    return a.tape._register(-a.value, a.requires_grad, ((a, lambda g: -g),), "neg")


def multiply(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        tape = _tape_of(a, b)
        value = a.value * b.value
        a_val, b_val = a.value, b.value
        parents = (
            (a, lambda g: _unbroadcast(g * b_val, a_val.shape)),
            (b, lambda g: _unbroadcast(g * a_val, b_val.shape)),
        )
        grad = a.requires_grad or b.requires_grad
        return tape._register(value, grad, parents, "mul")
    scalar = float(b)
    a_shape = a.value.shape
    return a.tape._register(
        a.value * scalar, a.requires_grad,
        ((a, lambda g: _unbroadcast(g * scalar, a_shape)),), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradient rules dA = G @ B^T, dB = A^T @ G."""
    tape = _tape_of(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul requires rank-2 operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.value.shape} x {b.value.shape}")
    a_val, b_val = a.value, b.value
    parents = (
        (a, lambda g: g @ b_val.T),
        (b, lambda g: a_val.T @ g),
    )
    return tape._register(a_val @ b_val, a.requires_grad or b.requires_grad,
                          parents, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise DimensionError("transpose requires a rank-2 operand")
    return a.tape._register(a.value.T.copy(), a.requires_grad,
                            ((a, lambda g: g.T),), "transpose")


def total(a: Tensor) -> Tensor:
    """Sum of all elements, producing a scalar."""
    a_shape = a.value.shape
    return a.tape._register(
        np.asarray(np.sum(a.value)), a.requires_grad,
        ((a, lambda g: np.broadcast_to(g, a_shape).copy()),), "sum")


def elu(a: Tensor) -> Tensor:
    x = a.value
    value = np.where(x > 0.0, x, np.expm1(x))
    slope = np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))
    return a.tape._register(value, a.requires_grad,
                            ((a, lambda g: g * slope),), "elu")


def softplus(a: Tensor) -> Tensor:
    value = np.logaddexp(0.0, a.value)
    sig = expit(a.value)
    return a.tape._register(value, a.requires_grad,
                            ((a, lambda g: g * sig),), "softplus")


def exp(a: Tensor) -> Tensor:
    value = np.exp(a.value)
    return a.tape._register(value, a.requires_grad,
                            ((a, lambda g: g * value),), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise NumericalError("log of a non-positive value")
    x = a.value
    return a.tape._register(np.log(x), a.requires_grad,
                            ((a, lambda g: g / x),), "log")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.value == 0.0):
        raise NumericalError("reciprocal of zero")
    value = 1.0 / a.value
    return a.tape._register(value, a.requires_grad,
                            ((a, lambda g: -g * value * value),), "reciprocal")


def chol_solve_logdet(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Solve A X = B and return (X, ln det A) for SPD A, both differentiable.

    One Cholesky factorization (with the jitter policy of
    ``jittered_cholesky``) backs the solve, the log-determinant, and all
    backward-pass solves.
    """
    tape = _tape_of(a, b)
    if a.value.ndim != 2 or a.value.shape[0] != a.value.shape[1]:
        raise DimensionError("chol_solve_logdet requires a square matrix A")
    if b.value.ndim != 2 or b.value.shape[0] != a.value.shape[0]:
        raise DimensionError(
            f"right-hand side shape {b.value.shape} does not match A {a.value.shape}")
    factor = jittered_cholesky(a.value)
    x_val = cho_solve((factor, True), b.value)
    logdet_val = np.asarray(2.0 * np.sum(np.log(np.diag(factor))))

    def vjp_a_from_x(g: Array, x=x_val, f=factor) -> Array:
        return -cho_solve((f, True), g) @ x.T

    def vjp_b_from_x(g: Array, f=factor) -> Array:
        return cho_solve((f, True), g)

    def vjp_a_from_logdet(g: Array, f=factor, n=a.value.shape[0]) -> Array:
        return float(g) * cho_solve((f, True), np.eye(n))

    x = tape._register(x_val, a.requires_grad or b.requires_grad,
                       ((a, vjp_a_from_x), (b, vjp_b_from_x)), "chol_solve")
    logdet = tape._register(logdet_val, a.requires_grad,
                            ((a, vjp_a_from_logdet),), "logdet")
    return x, logdet
