"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation produces a :class:`Tensor` that remembers the
:class:`Node` that created it. Nodes carry a monotonically increasing id, so
sorting the nodes reachable from a loss by id gives the recording order of the
tape; :func:`backward` replays that order in reverse, visiting each node once.

Training runs in 32-bit floats. Gradient checks switch to 64-bit with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "fumnet_dtype", default=np.dtype(np.float32)
)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("fumnet_grad", default=True)
_NODE_IDS = itertools.count()
_DEBUG_FINITE = False


def default_dtype() -> np.dtype:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and parameters."""
    token = _DTYPE.set(np.dtype(dtype))
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run forward passes without recording operations."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def set_debug(enabled: bool) -> None:
    """Check every forward result for NaN/Inf when enabled."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = enabled


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and how to push a gradient back."""

    name: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    id: int = field(default_factory=lambda: next(_NODE_IDS))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or default_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data), dtype=x.dtype)


def make_result(data: np.ndarray, name: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap `data` as the output of an operation and record it when needed.

    `backward_fn` maps the output gradient to one gradient (or None) per input.
    """
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED.get() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, tuple(inputs), backward_fn)
    return out


# -- tape -----------------------------------------------------------------
class Tape:
    """Operations reachable from a root tensor, in recording order.

    Each entry pairs a node with the tensor it produced.
    """

    def __init__(self, root: Tensor):
        found: dict[int, tuple[Node, Tensor]] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            n = t.node
            if n is None or n.id in found:
                continue
            found[n.id] = (n, t)
            stack.extend(n.inputs)
        self.entries: list[tuple[Node, Tensor]] = [found[k] for k in sorted(found)]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def backward(loss: Tensor) -> None:
    """Populate `.grad` of every leaf tensor that `loss` depends on.

    Gradients accumulate, so a tensor used on several paths receives the sum,
    and calling backward twice without clearing adds the second result.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for node, out in reversed(Tape(loss).entries):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi


# -- elementwise ------------------------------------------------------------
def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("add", a, b)
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("sub", a, b)
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    fns = {"add": add, "sub": sub, "mul": mul}
    if op not in fns:
        raise ValueError(f"unknown elementwise op {op!r}")
    return fns[op](a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_result(x.data * c, "scale", (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(xd * xd, "square", (x,), lambda g: (2 * g * xd,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)
    return make_result(y, "sigmoid", (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_result(y, "tanh", (x,), lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_result(y, "relu", (x,), lambda g: (g * mask,))


def activation(kind: str, x: Tensor) -> Tensor:
    fns = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
    if kind not in fns:
        raise ValueError(f"unknown activation {kind!r}")
    return fns[kind](x)


# -- reductions and shape ops ---------------------------------------------
def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    y = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(y, "sum", (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    y = np.asarray(x.data.transpose(axes), order="C")
    return make_result(y, "transpose", (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    y = np.asarray(x.data[index], order="C")

    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in
                (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_result(y, "getitem", (x,), bw)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat `x` along a new leading axis of length `n`."""
    y = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return make_result(y, "expand", (x,), lambda g: (g.sum(axis=0),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    return make_result(y, "concat", tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=ax)))


def concat_feature(a: Tensor, b: Tensor) -> Tensor:
    """Join two sequences step by step along the feature (last) axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_feature: leading dims differ {a.shape} vs {b.shape}")
    return concat([a, b], axis=-1)


def split_feature(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    return getitem(x, (Ellipsis, slice(0, at))), getitem(x, (Ellipsis, slice(at, None)))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- gradient checking ----------------------------------------------------
@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray
    nonfinite: list[tuple[int, ...]]

    @property
    def passed(self) -> bool:
        return not self.nonfinite and self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    # below `floor` in magnitude, the error is measured relative to the floor
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3,
              tol: float = 1e-4, skip: Callable[[np.ndarray], np.ndarray] | None = None) -> GradcheckReport:
    """Compare the gradient of scalar `f` at `x` against central differences.

    `x` is perturbed in place coordinate by coordinate and restored. `skip`
    may return a boolean mask of coordinates to leave out of the error (for
    example points near a relu kink).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x.grad = None
    x.requires_grad = True
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    bad: list[tuple[int, ...]] = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(x).data.sum())
        flat[i] = orig - step
        lo = float(f(x).data.sum())
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            bad.append(np.unravel_index(i, x.shape))
            continue
        numeric.reshape(-1)[i] = (hi - lo) / (2 * step)
    err = relative_error(analytic.astype(np.float64), numeric)
    if skip is not None:
        err = np.where(skip(x.data), 0.0, err)
    x.grad = None
    return GradcheckReport(float(err.max(initial=0.0)), tol, analytic, numeric, bad)
