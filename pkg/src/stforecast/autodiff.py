"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation builds a node that remembers its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks the
graph in reverse topological order, accumulates into ``Parameter.grad``
and then drops the graph so nothing survives between training steps.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from collections.abc import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateMaskError, DimensionError, NumericError

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_kink_log: contextvars.ContextVar[list | None] = contextvars.ContextVar("kink_log", default=None)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording a backward graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def record_kinks():
    """Collect the branch taken by every piecewise op (relu, abs, max).

    Two evaluations with equal logs lie on the same smooth piece of the
    function, which is what a central difference needs.
    """
    log: list = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


def _log_kink(pattern: np.ndarray) -> None:
    log = _kink_log.get()
    if log is not None:
        log.append(pattern)


class Tensor:
    __slots__ = ("_backward", "_parents", "data", "grad", "op", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def backward(self):
        backward(self)

    # operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mean(self)


class Parameter(Tensor):
    """A trainable leaf tensor. ``grad`` is always allocated."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), back, "mul")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    if _kink_log.get() is not None:
        _log_kink(xd > 0)

    def back(g):
        return (np.where(xd > 0, g, 0.0),)

    return _node(np.maximum(xd, 0.0), (x,), back, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    xd = x.data
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g):
        return (g * y * (1.0 - y),)

    return _node(y, (x,), back, "sigmoid")


def tabs(x: Tensor) -> Tensor:
    """Absolute value; the subgradient at zero is 0."""
    x = as_tensor(x)
    s = np.sign(x.data)
    _log_kink(s)

    def back(g):
        return (g * s,)

    return _node(np.abs(x.data), (x,), back, "abs")


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by tag: add, mul, sub, relu, sigmoid, abs."""
    binary = {"add": add, "mul": mul, "sub": sub}
    unary = {"relu": relu, "sigmoid": sigmoid, "abs": tabs}
    if op in binary:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        # flatten the leading axes into one big GEMM
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))

        def back(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _node(out, (a, b), back, "matmul")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), back, "matmul")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), back, "sum")


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return mul(tsum(x), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from None

    def back(g):
        return (g.reshape(old),)

    return _node(out, (x,), back, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (np.swapaxes(g, a, b),)

    return _node(np.swapaxes(x.data, a, b), (x,), back, "swapaxes")


def getitem(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int)) or i is Ellipsis or i is None for i in items)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(x.data[idx], (x,), back, "getitem")


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather along one axis; repeated indices accumulate gradient."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    shape = x.shape
    ax = axis % x.ndim

    def back(g):
        full = np.zeros(shape)
        gm = np.moveaxis(g, ax, 0)
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, indices, gm)
        return (full,)

    return _node(np.take(x.data, indices, axis=ax), (x,), back, "take")


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    if len(parts) == 1:
        return parts[0]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                "concat: leading extents disagree: " + ", ".join(str(q.shape) for q in parts)
            )
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _node(np.concatenate([p.data for p in parts], axis=-1), parts, back, "concat")


def split_lastdim(x: Tensor, widths: Sequence[int]) -> list[Tensor]:
    if sum(widths) != x.shape[-1]:
        raise DimensionError(f"split widths {list(widths)} do not sum to {x.shape[-1]}")
    out, start = [], 0
    for w in widths:
        out.append(getitem(x, (Ellipsis, slice(start, start + w))))
        start += w
    return out


def amax(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; gradient flows to the first maximiser."""
    x = as_tensor(x)
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    _log_kink(arg)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.put_along_axis(full, arg, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(np.take_along_axis(x.data, arg, axis=axis).squeeze(axis), (x,), back, "max")


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean, broadcastable to ``x``, True where an entry takes part.
    Masked entries are exactly 0 in the output.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _broadcast_shape(xd.shape, mask.shape, "softmax mask")
        if np.broadcast_shapes(xd.shape, mask.shape) != xd.shape:
            raise DimensionError(f"mask {mask.shape} does not broadcast to {xd.shape}")
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("softmax: a row has every entry masked")
        xd = xd + np.where(mask, 0.0, -np.inf)
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# backward


def _topo_order(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf.

    Parameters in ``params`` that the loss does not reach end with a zero
    gradient. The graph is released afterwards.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.zero_grad()
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, copy=True)
            else:
                node.grad = node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# finite-difference verification


def _sample_coords(params: Sequence[Parameter], per_param: int | None, total: int | None, rng):
    coords = []
    if per_param is not None:
        for pi, p in enumerate(params):
            k = min(per_param, p.size)
            for flat in rng.choice(p.size, size=k, replace=False):
                coords.append((pi, int(flat)))
    else:
        sizes = np.array([p.size for p in params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        n = min(total if total is not None else int(offsets[-1]), int(offsets[-1]))
        for flat in rng.choice(int(offsets[-1]), size=n, replace=False):
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            coords.append((pi, int(flat - offsets[pi])))
    return coords


def finite_difference_report(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    per_param: int | None = None,
    total: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
    min_coords: int = 0,
) -> dict:
    """Compare analytic gradients with central differences.

    Coordinates whose +/- step evaluations take a different branch of a
    piecewise op than the base point are resampled when ``skip_kinks`` is
    set; the derivative is undefined inside such a stencil.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with record_kinks() as base_kinks:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is not finite at the base point")
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    coords = _sample_coords(params, per_param, total, rng)
    pool = None

    def same_branch(log):
        return len(log) == len(base_kinks) and all(
            np.array_equal(a, b) for a, b in zip(log, base_kinks)
        )

    def evaluate(p, flat, delta):
        view = p.data.reshape(-1)
        old = view[flat]
        view[flat] = old + delta
        try:
            with no_grad(), record_kinks() as log:
                val = f().item()
        finally:
            view[flat] = old
        if not math.isfinite(val):
            raise NumericError(f"objective not finite when perturbing {p.name}[{flat}]")
        return val, log

    rows, skipped = [], 0
    queue = list(coords)
    target = max(len(coords), min_coords)
    tried = set()
    while queue and len(rows) < target:
        pi, flat = queue.pop(0)
        tried.add((pi, flat))
        p = params[pi]
        fp, lp = evaluate(p, flat, step)
        fm, lm = evaluate(p, flat, -step)
        if skip_kinks and not (same_branch(lp) and same_branch(lm)):
            skipped += 1
            if pool is None:
                pool = [(i, j) for i, q in enumerate(params) for j in range(q.size)]
                rng.shuffle(pool)
            # replace with a fresh coordinate from the same tensor when possible
            for cand in pool:
                if cand not in tried and cand[0] == pi:
                    queue.append(cand)
                    tried.add(cand)
                    break
            continue
        num = (fp - fm) / (2.0 * step)
        ana = float(analytic[pi].reshape(-1)[flat])
        rel = abs(ana - num) / (abs(ana) + abs(num) + 1e-8)
        rows.append((p.name, flat, ana, num, rel))
    max_rel = max((r[-1] for r in rows), default=0.0)
    return {"max_rel_error": max_rel, "checked": rows, "skipped": skipped}


def finite_difference_check(
    f: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5, **kwargs
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return finite_difference_report(f, params, step, **kwargs)["max_rel_error"]
