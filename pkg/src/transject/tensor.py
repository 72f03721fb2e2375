"""Dense float64 tensors with reverse-mode automatic differentiation.

Arrays live in numpy; every differentiable operation records its parents and a
vector-Jacobian rule so that :func:`backward` can walk the graph once in
reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3

_grad_enabled = True


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, benchmarking)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_version", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}: shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._version = 0
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable) -> "Tensor":
        """Build an op output. ``vjp(g)`` returns one gradient (or None) per parent."""
        out = cls.__new__(cls)
        if data.ndim > MAX_RANK:
            raise DimensionError(f"rank {data.ndim} exceeds {MAX_RANK}: shape {data.shape}")
        out.data = data
        out.grad = None
        out._version = 0
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._vjp = vjp if track else None
        return out

    # -- basic properties -------------------------------------------------
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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def assign_(self, values: np.ndarray) -> None:
        """In-place parameter update; bumps the version so derived caches refresh."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.data.shape:
            raise DimensionError(f"cannot assign {values.shape} into {self.data.shape}")
        self.data[...] = values
        self._version += 1

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor.from_op(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


# -- nonlinearities -------------------------------------------------------------

def elu(x: Tensor) -> Tensor:
    out = np.minimum(x.data, 0.0)
    np.expm1(out, out=out)
    out += np.maximum(x.data, 0.0)
    # slope is 1 where x > 0 and exp(x) = out + 1 elsewhere
    return Tensor.from_op(out, (x,), lambda g: (g * (np.minimum(out, 0.0) + 1.0),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(np.atleast_1d(x.data)).reshape(x.shape)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor.from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return Tensor.from_op(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -- linear algebra / shape ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if a.ndim == 3 and b.ndim == 2:
        # batch of rows against a shared weight: fold batch into rows
        B, N, K = a.shape
        out = (a.data.reshape(B * N, K) @ b.data).reshape(B, N, b.shape[1])

        def vjp(g):
            g2 = g.reshape(B * N, -1)
            return (g2 @ b.data.T).reshape(a.shape), a.data.reshape(B * N, K).T @ g2

        return Tensor.from_op(out, (a, b), vjp)
    if a.ndim != b.ndim and not (a.ndim == 2 and b.ndim == 3):
        raise DimensionError(f"matmul: unsupported ranks {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor.from_op(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
    return Tensor.from_op(np.swapaxes(a.data, -1, -2).copy(), (a,),
                          lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis, keepdims), 1.0 / float(n))


def tmax(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the lowest-index argmax."""
    idx = np.argmax(a.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)

    return Tensor.from_op(out, (a,), vjp)


def tmin(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    return scale(tmax(scale(a, -1.0), axis, keepdims), -1.0)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: incompatible shapes {ref} and {p.shape}")
    widths = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=ax)

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(parts)))

    return Tensor.from_op(out, parts, vjp)


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for {a.shape}")
    out = a.data[..., start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return Tensor.from_op(out, (a,), vjp)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` may be 1-D or 2-D."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    out = table.data[ids]

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return Tensor.from_op(out, (table,), vjp)


# -- pooling and losses ------------------------------------------------------------

def _seq_mask(x: Tensor, mask) -> np.ndarray:
    if mask is None:
        return np.ones(x.shape[:-1])
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape[:-1]:
        raise DimensionError(f"mask shape {mask.shape} does not match {x.shape[:-1]}")
    return mask


def mean_pool(x: Tensor, mask=None) -> Tensor:
    """Average over the sequence axis (second to last), ignoring masked positions."""
    m = _seq_mask(x, mask)[..., None]
    count = m.sum(axis=-2, keepdims=True)
    w = m / count
    out = (x.data * w).sum(axis=-2)
    return Tensor.from_op(out, (x,), lambda g: (np.expand_dims(g, -2) * w,))


def max_pool(x: Tensor, mask=None) -> Tensor:
    """Max over the sequence axis; ties resolve to the lowest position."""
    m = _seq_mask(x, mask)[..., None]
    masked = np.where(m > 0, x.data, -np.inf)
    idx = np.expand_dims(np.argmax(masked, axis=-2), -2)
    out = np.squeeze(np.take_along_axis(x.data, idx, axis=-2), -2)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, np.expand_dims(g, -2), axis=-2)
        return (full,)

    return Tensor.from_op(out, (x,), vjp)


def cross_entropy(logits: Tensor, target, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets over the last axis.

    ``logits`` is (..., C); ``target`` has shape logits.shape[:-1]. Masked
    entries (mask == 0) are left out of the mean.
    """
    target = np.asarray(target, dtype=np.int64)
    if target.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: target {target.shape} vs logits {logits.shape}")
    w = np.ones(target.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: every position is masked")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, target[..., None],
                          np.take_along_axis(p, target[..., None], axis=-1) - 1.0, axis=-1)
        return (g * p * (w / total)[..., None],)

    return Tensor.from_op(np.asarray(loss), (logits,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor.from_op(out, (x, gamma, beta), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Identity when ``p == 0`` or no generator is given (eval)."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor.from_op(x.data * keep, (x,), lambda g: (g * keep,))


# -- backward -----------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Only leaves (tensors created directly with ``requires_grad=True``) retain
    gradients; repeated calls add to what is already there.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


mean = tmean
sum_ = tsum
