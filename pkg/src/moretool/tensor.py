"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions. When a :class:`Graph` is active (``with
Graph() as g:``) every operation whose inputs require gradients is appended to
the graph's tape; ``g.backward(loss)`` then walks the tape once in reverse.
Outside a graph the same functions are a plain forward pass, which is what
inference uses.

The active graph lives in a ``contextvars.ContextVar`` so that each thread
(and each asyncio task) has its own tape.
"""

from __future__ import annotations

import contextvars
import enum
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

VARIANCE_FLOOR = 1e-5
BN_MOMENTUM = 0.99


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(ArithmeticError):
    """Raised when a gradient check meets a non-finite value."""


class KinkError(GradCheckError):
    """The check point lies too close to a non-differentiable point."""


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Tensor:
    """An n-dimensional float64 array that can take part in a :class:`Graph`.

    ``value`` is never mutated in place by operations; ops always allocate
    a fresh output array.
    """

    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Op:
    name: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_ACTIVE: contextvars.ContextVar[Optional["Graph"]] = contextvars.ContextVar(
    "moretool_active_graph", default=None
)


class Graph:
    """A tape of recorded primitive operations.

    Use as a context manager; operations executed inside the block are
    recorded in execution order, which is a valid topological order.
    """

    def __init__(self, mode: Mode = Mode.TRAIN):
        self.mode = Mode(mode)
        self.ops: list[_Op] = []
        self._token = None

    def __enter__(self) -> "Graph":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, name: str, inputs: tuple, output: Tensor, backward) -> None:
        self.ops.append(_Op(name, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tensor reachable from ``loss``.

        Each recorded op is visited exactly once, in reverse order. Gradients
        flowing into a tensor from several consumers are summed.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        seen: dict[int, Tensor] = {id(loss): loss}
        for op in reversed(self.ops):
            g_out = grads.pop(id(op.output), None)
            if g_out is None:
                continue
            op.output.grad = g_out
            for tensor, g in zip(op.inputs, op.backward(g_out)):
                if g is None or not isinstance(tensor, Tensor) or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    seen[key] = tensor
        # whatever is left are leaves (parameters, inputs)
        for key, g in grads.items():
            seen[key].grad = g


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


def active_graph() -> Optional[Graph]:
    return _ACTIVE.get()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, inputs: tuple, value: np.ndarray, backward) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    graph = _ACTIVE.get()
    out = Tensor(value, requires_grad=needs and graph is not None)
    if out.requires_grad:
        graph.record(name, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        "add",
        (a, b),
        a.value + b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        "sub",
        (a, b),
        a.value - b.value,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        "mul",
        (a, b),
        a.value * b.value,
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.value >= b.value
    return _emit(
        "maximum",
        (a, b),
        np.where(pick_a, a.value, b.value),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit(
        "matmul",
        (a, b),
        a.value @ b.value,
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _emit("log", (x,), np.log(x.value), lambda g: (g / x.value,))


def reciprocal(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    inv = 1.0 / x.value
    return _emit("reciprocal", (x,), inv, lambda g: (-g * inv * inv,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _emit("clip", (x,), np.clip(x.value, lo, hi), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    on = x.value > 0
    return _emit("relu", (x,), np.where(on, x.value, 0.0), lambda g: (g * on,))


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = _sigmoid_np(x.value)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = _as_tensor(x)
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _emit("softplus", (x,), out, lambda g: (g * _sigmoid_np(v),))


def _softmax_np(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    s = _softmax_np(x.value, axis)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), s, back)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    m = v.max(axis=axis, keepdims=True)
    out = np.log(np.exp(v - m).sum(axis=axis, keepdims=True)) + m
    s = np.exp(v - out)
    return _emit(
        "logsumexp",
        (x,),
        np.squeeze(out, axis=axis),
        lambda g: (np.expand_dims(g, axis) * s,),
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    v = x.value
    z = v - v.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return _emit(
        "log_softmax",
        (x,),
        out,
        lambda g: (g - s * g.sum(axis=axis, keepdims=True),),
    )


def l2_normalize(x: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_tensor(x)
    v = x.value
    norm = np.sqrt((v * v).sum(axis=axis, keepdims=True))
    clamped = norm < eps
    denom = np.where(clamped, eps, norm)
    out = v / denom

    def back(g):
        # inside the clamp the denominator is a constant
        proj = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(clamped, g / denom, (g - out * proj) / denom),)

    return _emit("l2_normalize", (x,), out, back)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (x,), x.value.sum(axis=axis, keepdims=keepdims), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _emit("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _emit("transpose", (x,), x.value.T.copy(), lambda g: (g.T,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    values = [t.value for t in tensors]
    sizes = [v.shape[axis] for v in values]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[v.shape for v in values]}") from exc
    return _emit(
        "concat",
        tensors,
        out,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor (a permutation or a subset)."""
    x = _as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit("take_rows", (x,), x.value[index], back)


# ---------------------------------------------------------------------------
# layers with state or randomness


class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, running_mean: Tensor, running_var: Tensor):
        self.running_mean = running_mean
        self.running_var = running_var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: Mode,
    momentum: float = BN_MOMENTUM,
    floor: float = VARIANCE_FLOOR,
) -> Tensor:
    """Batch normalization over axis 0 of a ``batch x d`` tensor.

    In train mode the running statistics in ``state`` are replaced (not
    mutated) with their momentum-averaged update.
    """
    x = _as_tensor(x)
    v = x.value
    if Mode(mode) is Mode.EVAL:
        std = np.sqrt(np.maximum(state.running_var.value, floor))
        xhat = (v - state.running_mean.value) / std
        out = xhat * gamma.value + beta.value

        def back_eval(g):
            return (g * gamma.value / std, (g * xhat).sum(axis=0), g.sum(axis=0))

        return _emit("batch_norm", (x, gamma, beta), out, back_eval)

    n = v.shape[0]
    if n < 2:
        raise ValueError("batch_norm in train mode needs a batch of at least 2")
    mu = v.mean(axis=0)
    centered = v - mu
    var = (centered * centered).mean(axis=0)
    floored = var < floor
    std = np.sqrt(np.where(floored, floor, var))
    xhat = centered / std
    out = xhat * gamma.value + beta.value

    state.running_mean = Tensor(momentum * state.running_mean.value + (1 - momentum) * mu)
    state.running_var = Tensor(momentum * state.running_var.value + (1 - momentum) * var)

    def back(g):
        gx = g * gamma.value
        mean_g = gx.mean(axis=0)
        mean_gx = (gx * xhat).mean(axis=0)
        # a floored variance is a constant, so only the centring contributes
        mean_gx = np.where(floored, 0.0, mean_gx)
        dx = (gx - mean_g - xhat * mean_gx) / std
        return (dx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _emit("batch_norm", (x, gamma, beta), out, back)


def dropout(x: Tensor, keep_prob: float, rng: Optional[np.random.Generator], mode: Mode) -> Tensor:
    """Inverted dropout. Identity in eval mode or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    x = _as_tensor(x)
    if Mode(mode) is Mode.EVAL or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    scale = (rng.random(x.shape) < keep_prob) / keep_prob
    return _emit("dropout", (x,), x.value * scale, lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# verification


def kink_distance(graph: Graph) -> float:
    """Smallest distance of any recorded relu or maximum input from its kink."""
    dist = np.inf
    for op in graph.ops:
        if op.name == "relu":
            v = np.abs(op.inputs[0].value)
        elif op.name == "maximum":
            v = np.abs(op.inputs[0].value - op.inputs[1].value)
        else:
            continue
        if v.size:
            dist = min(dist, float(v.min()))
    return dist


def pole_distance(graph: Graph) -> float:
    """Smallest magnitude of any recorded reciprocal input."""
    dist = np.inf
    for op in graph.ops:
        if op.name == "reciprocal" and op.inputs[0].size:
            dist = min(dist, float(np.abs(op.inputs[0].value).min()))
    return dist


def grad_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    tolerance: float = 1e-3,
    max_coords: int = 10_000,
    rng: Optional[np.random.Generator] = None,
    kink_margin: Optional[float] = None,
    pole_margin: Optional[float] = None,
) -> float:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` takes no arguments and must rebuild its output from the current
    values of ``inputs`` each time it is called (it is evaluated once under a
    graph and ``2 * n`` more times without one). Returns the worst relative
    error ``|a - n| / max(|a|, |n|, 1e-8)`` over the checked coordinates.
    When there are more than ``max_coords`` coordinates a random subsample is
    checked. ``tolerance`` is not enforced here; callers compare against it.

    Central differences are meaningless across a ReLU/max kink. With
    ``kink_margin`` set, a :class:`KinkError` is raised (before any
    differencing) when some relu or maximum input lies closer than that to its
    kink, so the caller can redraw the instance. ``pole_margin`` does the same
    for reciprocal inputs near zero, where the truncation error of a central
    difference grows like ``(step / |x|) ** 2``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Graph() as g:
        out = f()
    if kink_margin is not None and kink_distance(g) < kink_margin:
        raise KinkError(f"an activation lies within {kink_margin} of a kink")
    if pole_margin is not None and pole_distance(g) < pole_margin:
        raise KinkError(f"a reciprocal input lies within {pole_margin} of zero")
    g.backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        t = inputs[i]
        if not t.value.flags.c_contiguous:
            t.value = np.ascontiguousarray(t.value)
        flat = t.value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        plus = float(f().value)
        flat[j] = orig - step
        minus = float(f().value)
        flat[j] = orig
        num = (plus - minus) / (2 * step)
        ana = float(analytic[i].reshape(-1)[j])
        if not (np.isfinite(num) and np.isfinite(ana)):
            name = t.name or f"input {i}"
            raise GradCheckError(
                f"non-finite gradient at {name}[{j}]: analytic={ana}, numeric={num}"
            )
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
