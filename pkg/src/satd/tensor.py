"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op records its parents and a backward closure on the
output tensor. ``Tensor.backward`` walks the recorded nodes in reverse
topological order and accumulates gradients into ``.grad``. Tensors that do
not require gradients never enter the tape, so frozen computations (encoders,
teacher logits) cost only the numpy arithmetic.

Broadcasting is limited to scalars and row-wise vectors (a 1-D operand whose
length equals the trailing dimension of the other operand).
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import DegenerateVectorError, DimensionError, EvaluationError, ParameterError

EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording within the block."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @classmethod
    def _wrap(cls, data):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = "const"
        return t

    # -- introspection ---------------------------------------------------
    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    # -- reverse pass ----------------------------------------------------
    def backward(self, grad=None):
        if not self.requires_grad:
            raise EvaluationError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor._wrap(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str):
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return
    raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks every gradient in the reverse pass."""
    out = Tensor._wrap(x.data)
    out.op = "stop_gradient"
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.data.shape, b.data.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _reduce_to(g * bd, ad.shape) if a.requires_grad else None
        gb = _reduce_to(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product. Raises DimensionError naming both shapes on mismatch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    src = a.data.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(src),), "reshape")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ParameterError("log of a non-positive value")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    x = a.data
    y = np.logaddexp(0.0, x)
    sig = np.exp(x - y)
    return _result(y, (a,), lambda g: (g * sig,), "softplus")


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.data.shape
    if axis is None:
        return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def _check_tau(tau):
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def softmax_temp(z: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of ``z / tau`` along the last axis."""
    _check_tau(tau)
    z = _as_tensor(z)
    s = z.data / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=-1, keepdims=True)) * y / tau,)

    return _result(y, (z,), backward, "softmax")


def log_softmax_temp(z: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    z = _as_tensor(z)
    s = z.data / tau
    s = s - s.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    y = s - lse
    p = np.exp(y)

    def backward(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / tau,)

    return _result(y, (z,), backward, "log_softmax")


def l2_normalize(v: Tensor, eps: float = EPS) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    v = _as_tensor(v)
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateVectorError(f"row norm at or below {eps}; cannot normalize")
    y = v.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (v,), backward, "l2_normalize")


def cosine_sim_matrix(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_sim_matrix: feature dims differ, {a.shape} vs {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]} along axis {axis}") from exc
    bounds = np.cumsum([p.data.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, parts, backward, "concat")


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in the gradient."""
    index = np.asarray(index, dtype=np.intp)
    shape = a.data.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), backward, "take_rows")


def group_mean(a: Tensor, size: int) -> Tensor:
    """Mean of consecutive blocks of ``size`` rows: [G*size, d] -> [G, d]."""
    rows, d = a.data.shape
    if size < 1 or rows % size:
        raise DimensionError(f"group_mean: {rows} rows do not split into groups of {size}")
    data = a.data.reshape(rows // size, size, d).mean(axis=1)

    def backward(g):
        return (np.repeat(g / size, size, axis=0),)

    return _result(data, (a,), backward, "group_mean")


def repeat_rows(a: Tensor, times: int) -> Tensor:
    """Repeat every row ``times`` times consecutively: [G, d] -> [G*times, d]."""
    g_rows, d = a.data.shape

    def backward(g):
        return (g.reshape(g_rows, times, d).sum(axis=1),)

    return _result(np.repeat(a.data, times, axis=0), (a,), backward, "repeat_rows")


def grad_check(f, inputs, h: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``f`` maps the input tensors to a scalar tensor. The error for one entry is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("function is not finite at the given inputs")
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"function is not finite under a step of {h}")
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
