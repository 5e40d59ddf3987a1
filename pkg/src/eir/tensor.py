"""Dense float64 tensors with a reverse-mode gradient tape.

Only the operations the encoder and the training losses need are provided.
Broadcasting is restricted to tensor-scalar arithmetic; per-row and
per-channel combinations go through the explicit ``add_bias`` and
``row_scale`` ops.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import DegenerateNormError, DimensionError, DomainError, ParameterError

NORM_EPS = 1e-12

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording operations on the tape."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        Tape.record(self).backward()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor division is not supported; use scale()")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Operations reachable from a root, in topological order.

    Every node appears after all of its inputs, so walking the list in
    reverse visits each node only once all its consumers are done.
    """

    def __init__(self, root: Tensor, nodes: list[Tensor]):
        self.root = root
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(root, order)

    def backward(self) -> None:
        root = self.root
        if root.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {root.shape}")
        if not root.requires_grad:
            raise DimensionError("loss is not connected to any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting)")


# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    return Tensor._result(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive value (min {a.data.min():.3g})")
    x = a.data
    return Tensor._result(np.log(x), (a,), lambda g: (g / x,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"exp": exp, "log": log, "relu": relu, "add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("exp", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a vector ``b`` along one axis of ``x`` (dense-layer or conv bias)."""
    axis = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias of shape {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return Tensor._result(
        x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=other))
    )


def row_scale(x: Tensor, s) -> Tensor:
    """Multiply row ``k`` of ``x`` by the constant ``s[k]``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (x.shape[0],):
        raise DimensionError(f"row scale of shape {s.shape} does not match {x.shape}")
    view = (-1,) + (1,) * (x.ndim - 1)
    sv = s.reshape(view)
    return Tensor._result(x.data * sv, (x,), lambda g: (g * sv,))


# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return Tensor._result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(src),))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        return Tensor._result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axis = axis % a.ndim
    return Tensor._result(
        a.data.sum(axis=axis), (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    )


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def index_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]``; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._result(a.data[idx], (a,), backward)


def pick(a: Tensor, cols) -> Tensor:
    """Select ``a[k, cols[k]]`` for every row ``k`` of a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or cols.shape != (a.shape[0],):
        raise DimensionError(f"pick needs one column per row, got {cols.shape} for {a.shape}")
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return Tensor._result(a.data[rows, cols], (a,), backward)


# normalisation and softmax


def l2_normalize(a: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise DegenerateNormError(f"cannot normalise a vector with norm <= {eps:g}")
    y = a.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._result(y, (a,), backward)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return tau


def softmax(a: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    """``exp(a/tau)`` normalised along ``axis`` with max subtraction."""
    tau = _check_tau(tau)
    z = a.data / tau
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)) / tau,)

    return Tensor._result(s, (a,), backward)


def log_softmax(a: Tensor, tau: float = 1.0, axis: int = -1) -> Tensor:
    tau = _check_tau(tau)
    z = a.data / tau
    zmax = z.max(axis=axis, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return ((g - s * g.sum(axis=axis, keepdims=True)) / tau,)

    return Tensor._result(out, (a,), backward)


# convolution blocks for the image encoder


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = np.empty((b, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, w: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of ``x[B,C,H,W]`` with ``w[F,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    b, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    cols = _im2col(x.data, kh, kw, padding)
    w2 = w.data.reshape(f, -1)
    out = np.matmul(w2, cols).reshape(b, f, ho, wo)

    def backward(g):
        g2 = g.reshape(b, f, ho * wo)
        gw = np.einsum("bfl,bkl->fk", g2, cols).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(b, c, kh, kw, ho, wo)
        gxp = np.zeros((b, c, h + 2 * padding, wd + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += gcols[:, :, i, j]
        gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        return (gx, gw)

    return Tensor._result(out, (x, w), backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route gradient to the first maximum."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even spatial size, got {h}x{w}")
    win = x.data.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return Tensor._result(out, (x,), backward)
