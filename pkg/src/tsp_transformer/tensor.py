"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record themselves while a :class:`Tape` is active on the
current thread. Outside a tape every op is a plain numpy computation, which is
what inference paths (greedy, beam search, baseline rollouts) rely on.
"""
from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "RunningStats",
    "DimensionError",
    "InfeasibleError",
    "current_tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "gather_rows",
    "getitem",
    "index_select",
    "tanh",
    "relu",
    "log",
    "sum",
    "mean",
    "softmax_masked",
    "layer_norm",
    "batch_norm",
    "gradcheck",
]

_local = threading.local()


class DimensionError(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the bookkeeping needed for backward replay."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, d: int, dtype=np.float32):
        self.mean = np.zeros(d, dtype=dtype)
        self.var = np.ones(d, dtype=dtype)
        self.initialized = False

    def seed(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.mean = np.array(mean, dtype=self.mean.dtype)
        self.var = np.array(var, dtype=self.var.dtype)
        self.initialized = True

    def copy(self) -> "RunningStats":
        out = RunningStats(self.mean.shape[0], self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        out.initialized = self.initialized
        return out


class no_grad:
    """Suspend recording on the current thread until exit."""

    def __enter__(self) -> None:
        _tape_stack().append(None)

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside it are appended in execution
    order, so replaying the list backwards visits every node after all of its
    consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse across threads
            raise RuntimeError("tape exited out of order")

    def record(self, out: Tensor, parents: tuple, fn: Callable) -> None:
        out._parents = parents
        out._backward = fn
        out._tape = self
        self.nodes.append(out)

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._tape = None
        self.nodes = []

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        loss.grad = np.ones_like(loss.data)
        seen: set[int] = set()
        for node in reversed(self.nodes):
            g = node.grad
            if g is None or node._backward is None:
                continue
            grads = node._backward(g)
            for parent, pg in zip(node._parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None and id(parent) not in seen:
                    # leaf: first contribution of this pass overwrites stale grads
                    seen.add(id(parent))
                    parent.grad = np.array(pg, dtype=parent.dtype)
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype)
                else:
                    parent.grad = parent.grad + pg
            if node is not loss:
                node.grad = None
        self.reset()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise RuntimeError("loss has no tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes follow numpy matmul."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}") from exc

    def fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(out, (a, b), fn)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(x: Tensor, index) -> Tensor:
    """Pick one row per batch entry: ``out[b] = x[b, index[b]]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise DimensionError(f"gather_rows index shape {index.shape} does not match batch of {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, index] = g
        return (gx,)

    return _make(x.data[rows, index], (x,), fn)


def getitem(x: Tensor, key) -> Tensor:
    """numpy indexing; gradients scatter back with accumulation on repeats."""
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), fn)


def index_select(x: Tensor, index) -> Tensor:
    """Select entries along axis 0 (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def fn(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), fn)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax_masked(logits: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax with excluded entries.

    ``mask`` is a boolean array broadcastable to ``logits``; True marks an
    excluded entry, which is treated as a logit of -inf and gets probability
    exactly 0.
    """
    x = logits.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if np.any(np.all(mask, axis=axis)):
            raise InfeasibleError("no feasible successor: every entry of a row is masked")
        x = np.where(mask, -np.inf, x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / np.sum(e, axis=axis, keepdims=True)).astype(logits.dtype)

    def fn(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (logits,), fn)


def _normalize_backward(g_hat, x_hat, inv_std, axes, count):
    # gradient of x_hat = (x - mu) * inv_std w.r.t. x, statistics over `axes`
    return inv_std * (
        g_hat
        - np.sum(g_hat, axis=axes, keepdims=True) / count
        - x_hat * np.sum(g_hat * x_hat, axis=axes, keepdims=True) / count
    )


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match d={d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (xd - mu) * inv_std
    out = x_hat * gain.data + bias.data
    lead = tuple(range(xd.ndim - 1))

    def fn(g):
        g_hat = g * gain.data
        gx = _normalize_backward(g_hat, x_hat, inv_std, -1, d)
        return gx, np.sum(g * x_hat, axis=lead), np.sum(g, axis=lead)

    return _make(out.astype(x.dtype), (x, gain, bias), fn)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    stats: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each channel (last axis) over all leading axes jointly.

    In training mode the batch statistics are used and folded into ``stats``
    with the given momentum; in eval mode the running statistics are used.
    """
    xd = x.data
    d = xd.shape[-1]
    axes = tuple(range(xd.ndim - 1))
    count = xd.size // d
    if training:
        if count < 2:
            raise DimensionError("batch_norm in training mode needs at least 2 rows per channel")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        unbiased = var * count / (count - 1)
        if stats.initialized:
            stats.mean = ((1 - momentum) * stats.mean + momentum * mu).astype(stats.mean.dtype)
            stats.var = ((1 - momentum) * stats.var + momentum * unbiased).astype(stats.var.dtype)
        else:
            stats.seed(mu, unbiased)
    else:
        if not stats.initialized:
            raise RuntimeError("uninitialized running statistics: run a training-mode pass or seed them")
        mu, var = stats.mean, stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    x_hat = (xd - mu) * inv_std
    out = (x_hat * gain.data + bias.data).astype(xd.dtype)

    def fn(g):
        g_hat = g * gain.data
        if training:
            gx = _normalize_backward(g_hat, x_hat, inv_std, axes, count)
        else:
            gx = g_hat * inv_std
        return gx, np.sum(g * x_hat, axis=axes), np.sum(g, axis=axes)

    return _make(out, (x, gain, bias), fn)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    zero_tol: float = 1e-7,
) -> list[float]:
    """Relative errors between tape gradients and central differences.

    ``fn`` rebuilds the scalar loss from the current values of ``params``. The
    error per parameter is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|)`` in the
    2-norm, or the absolute error when both gradients are below ``zero_tol``.
    The floor matters for weights whose true gradient is exactly zero (a bias
    feeding a training-mode batch norm): there the central difference returns
    only roundoff, around 1e-10 for losses of order one.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape():
        loss = fn()
        loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    errors = []
    for p, ga in zip(params, analytic):
        gn = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = gn.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        num = np.linalg.norm(ga - gn)
        den = max(np.linalg.norm(ga), np.linalg.norm(gn))
        errors.append(float(num) if den < zero_tol else float(num / den))
    return errors
