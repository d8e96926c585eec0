from __future__ import annotations

import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as la
from scipy.special import expit

logger = logging.getLogger(__name__)

Number = Union[int, float]
Operand = Union["Tensor", Number]

DEFAULT_JITTER_SCALE = 1e-6
MAX_JITTER_ESCALATIONS = 3


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinite values"""


class DomainError(ValueError):
    """Operation input outside of the mathematical domain (log of non-positive, div by zero)"""


class ShapeError(ValueError):
    """Operand shapes are incompatible"""


class CholeskyError(np.linalg.LinAlgError):
    """Factorization failed even after jitter escalation"""


class Tensor:
    """Dense float64 array node in a reverse-mode autodiff graph.

    Tensors produced by operations are immutable. Leaves created with
    ``requires_grad=True`` accumulate ``grad`` across ``backward`` calls
    until ``zero_grad`` is called.
    """

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} op={self.op} shape={self.shape} requires_grad={self.requires_grad}>"

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
        return not self._parents

    @property
    def T(self) -> Tensor:
        if self.ndim != 2:
            raise ShapeError(f"T is defined for 2-d tensors, got shape {self.shape}")
        return self.transpose((1, 0))

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # arithmetic
    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(_as_tensor(other), self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(_as_tensor(other), self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: Number) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index) -> Tensor:
        return take(self, index)

    # shape / reductions
    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def relu(self) -> Tensor:
        return relu(self)

    def softplus(self) -> Tensor:
        return softplus(self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
        count = self.size if axis is None else self.shape[axis]
        return tensor_sum(self, axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> Tensor:
        return transpose(self, axes)

    def expand(self, shape: Sequence[int]) -> Tensor:
        return expand(self, shape)

    def softmax(self) -> Tensor:
        return softmax_lastdim(self)


def tensor(data, requires_grad: bool = False, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result, enforce finiteness and register the backward rule"""
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``"""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a: Operand, b: Operand, op: str) -> Tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ and neither operand is a scalar")
    return a, b


# ===== ELEMENTWISE =====

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def _backward(g):
        return (_reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape))

    return _make(out, (a, b), _backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: Number) -> Tensor:
    if not isinstance(exponent, (int, float)):
        raise TypeError("power supports int/float exponents only")
    if not float(exponent).is_integer() and np.any(a.data <= 0.0):
        raise DomainError("power: fractional exponent of non-positive base")
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log: non-positive input")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("sqrt: non-positive input (derivative undefined)")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow"""
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),), "softplus")


_UNARY = {
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "relu": relu,
    "softplus": softplus,
    "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a: Operand, b: Optional[Operand] = None) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, exp, log, sigmoid, relu, ...)"""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{kind} takes a single operand")
        return _UNARY[kind](_as_tensor(a))
    raise ValueError(f"Unknown elementwise op: {kind}")


# ===== LINEAR ALGEBRA =====

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly"""
    if a.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: operands need equal rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), _backward, "matmul")


def cholesky(a: Tensor, jitter: Optional[float] = None, label: str = "matrix") -> Tensor:
    """Lower Cholesky factor of ``a + jitter * I`` with jitter escalation.

    The caller's jitter (default 1e-6 x mean diagonal) is multiplied by 10 up
    to three times before giving up with ``CholeskyError``.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky: expected a square matrix, got {a.shape}")
    n = a.shape[0]
    mean_diag = float(np.mean(np.abs(np.diag(a.data)))) or 1.0
    default = DEFAULT_JITTER_SCALE * mean_diag
    if jitter is None:
        jitter = default
    if jitter < 0:
        raise ValueError("cholesky: jitter must be non-negative")

    eye = np.eye(n)
    current = jitter
    factor = None
    for attempt in range(MAX_JITTER_ESCALATIONS + 1):
        try:
            factor = la.cholesky(a.data + current * eye, lower=True, check_finite=False)
            if np.all(np.diag(factor) > 0.0):
                break
            factor = None
        except la.LinAlgError:
            factor = None
        if attempt == MAX_JITTER_ESCALATIONS:
            break
        next_jitter = current * 10.0 if current > 0 else default
        logger.warning(f"Cholesky of {label} failed with jitter {current:.3e}, retrying with {next_jitter:.3e}")
        current = next_jitter

    if factor is None:
        raise CholeskyError(
            f"cholesky failed for {label} after {MAX_JITTER_ESCALATIONS} jitter escalations (last jitter {current:.3e})"
        )

    def _backward(g):
        phi = np.tril(factor.T @ g)
        phi[np.diag_indices(n)] *= 0.5
        upper = la.solve_triangular(factor, phi, lower=True, trans="T", check_finite=False)
        sym = la.solve_triangular(factor, upper.T, lower=True, trans="T", check_finite=False).T
        return (0.5 * (sym + sym.T),)

    return _make(factor, (a,), _backward, "cholesky")


def solve_triangular(lower: Tensor, b: Tensor) -> Tensor:
    """Solve ``lower @ x = b`` for a lower-triangular 2-d ``lower`` and 2-d ``b``"""
    if lower.ndim != 2 or b.ndim != 2 or lower.shape[0] != lower.shape[1] or lower.shape[1] != b.shape[0]:
        raise ShapeError(f"solve_triangular: incompatible shapes {lower.shape} and {b.shape}")
    out = la.solve_triangular(lower.data, b.data, lower=True, check_finite=False)

    def _backward(g):
        grad_b = la.solve_triangular(lower.data, g, lower=True, trans="T", check_finite=False)
        return (-np.tril(grad_b @ out.T), grad_b)

    return _make(out, (lower, b), _backward, "solve_triangular")


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two 2-d tensors: block (i, j) is a[i, j] * b"""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron: expected 2-d operands, got {a.shape} and {b.shape}")
    (m, n), (p, q) = a.shape, b.shape

    def _backward(g):
        blocks = g.reshape(m, p, n, q)
        return np.einsum("ikjl,kl->ij", blocks, b.data), np.einsum("ikjl,ij->kl", blocks, a.data)

    return _make(np.kron(a.data, b.data), (a, b), _backward, "kron")


def take_submatrix(a: Tensor, rows, cols) -> Tensor:
    """``a[rows][:, cols]`` of a 2-d tensor"""
    if a.ndim != 2:
        raise ShapeError(f"take_submatrix: expected a 2-d tensor, got {a.shape}")
    rows, cols = np.asarray(rows, dtype=int), np.asarray(cols, dtype=int)
    index = np.ix_(rows, cols)
    unique = np.unique(rows).size == rows.size and np.unique(cols).size == cols.size

    def _backward(g):
        grad = np.zeros_like(a.data)
        if unique:
            grad[index] = g
        else:
            np.add.at(grad, index, g)
        return (grad,)

    return _make(a.data[index], (a,), _backward, "take_submatrix")


# ===== SHAPE / REDUCTION =====

def tensor_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), _backward, "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast to ``shape`` (numpy rules); gradients are summed back"""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from e
    return _make(out, (a,), lambda g: (_reduce_to(g, a.shape),), "expand")


def take(a: Tensor, index) -> Tensor:
    """Basic or fancy indexing; repeated indices accumulate gradient"""
    out = a.data[index]

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out), (a,), _backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, _backward, "concat")


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by a finite constant"""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        mask = np.broadcast_to(mask, a.shape)
    keep = ~mask
    return _make(np.where(mask, value, a.data), (a,), lambda g: (g * keep,), "masked_fill")


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction"""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), _backward, "softmax")


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when rate is 0"""
    if not training or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


# ===== BACKWARD =====

class ComputationTape:
    """Topologically ordered record of the ops reachable from a root tensor"""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: List[Tensor] = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> List[Tensor]:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def run(self, seed: np.ndarray) -> None:
        pending: Dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.is_leaf:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if not parent.requires_grad or parent_grad is None:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from a scalar loss.

    Calling it again without ``zero_grad`` accumulates into the existing gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputationTape(loss).run(np.ones_like(loss.data))


def grad_check(f: Callable[[Tensor], Tensor], at: Tensor, eps: float = 1e-5, floor: float = 1e-12) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``at`` and central differences.

    ``at`` is used in place: its data is perturbed and restored, so ``f`` may
    close over it (e.g. a model parameter).
    """
    at.requires_grad = True
    at.zero_grad()
    out = f(at)
    if out.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros_like(at.data) if at.grad is None else at.grad.copy()
    at.zero_grad()

    numeric = np.zeros_like(at.data)
    flat = at.data.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        upper = f(at).item()
        flat[i] = saved - eps
        lower = f(at).item()
        flat[i] = saved
        numeric.reshape(-1)[i] = (upper - lower) / (2.0 * eps)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0
