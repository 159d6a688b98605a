"""Dense numeric substrate: a numpy-backed tensor with reverse-mode gradients.

Only the operations the toy transformer needs are provided. Every op checks its
result for NaN/Inf and raises :class:`NumericError` instead of propagating it.
"""

from __future__ import annotations

import math
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float64


class NumericError(ArithmeticError):
    """Raised when an operation produces a non-finite value."""


class Tensor:
    """An immutable array node in a computation graph.

    ``grad`` is the accumulator paired with this tensor; it is only allocated for
    tensors with ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return index(self, key)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


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
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")
    return out


def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Tensor:
    _check(data, op)
    if any(_needs_grad(p) for p in parents):
        return Tensor(data, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are reported by _make

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward, "div")


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward, "gelu")


# ------------------------------------------------------------------ reductions

def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis, keepdims), 1.0 / float(count))


# --------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x: Tensor, key) -> Tensor:
    """``x[key]``; the backward scatters with ``np.add.at`` so repeated indices accumulate."""
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (x,), backward, "index")


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    return index(x, rows)


def scatter_rows(x: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at ``rows`` of an ``n_rows``-row zero tensor (duplicates add)."""
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.data.dtype)
    np.add.at(out, rows, x.data)
    return _make(out, (x,), lambda g: (g[rows],), "scatter_rows")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), backward, "embedding")


# ----------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions follow numpy's matmul rules."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a.data, b.data)  # overflow is reported by _make

    def backward(g):
        ga = gb = None
        if _needs_grad(a):
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if _needs_grad(b):
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# ------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1, where: np.ndarray | None = None) -> Tensor:
    """Max-stabilised softmax; entries with ``where == False`` get probability 0."""
    z = x.data
    if where is not None:
        z = np.where(where, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a 2-D tensor, got shape {x.shape}")
    return softmax(x, axis=1)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """RMS normalisation over the last axis, scaled by ``gain``."""
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv
    out = xhat * gain.data
    d = x.shape[-1]

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, (_unbroadcast(g * xhat, gain.shape) if _needs_grad(gain) else None)

    return _make(out, (x, gain), backward, "rms_norm")


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: Sequence[int] | np.ndarray,
                  return_rows: bool = False):
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    With ``return_rows`` the per-row NLL values (a plain array) are returned too.
    """
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects logits of shape (n, v)")
    t = np.asarray(targets, dtype=np.intp)
    n, v = logits.shape
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {t.shape}")
    if n == 0:
        raise ValueError("cross_entropy over an empty batch")
    if t.min() < 0 or t.max() >= v:
        raise IndexError(f"target index out of range [0, {v})")
    logp = log_softmax_np(logits.data)
    rows = -logp[np.arange(n), t]
    out = np.asarray(rows.mean())

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    res = _make(out, (logits,), backward, "cross_entropy")
    return (res, rows) if return_rows else res


# -------------------------------------------------------------------------- RNG

def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class Rng:
    """Counter-based (Philox) generator, splittable into named sub-streams.

    The value sequence depends only on ``seed`` and the stream path, never on
    call order in other streams or on the platform.
    """

    def __init__(self, seed: int, stream: tuple = ()):
        self.seed = int(seed)
        self.stream = tuple(stream)
        entropy = [self.seed & 0xFFFFFFFF, (self.seed >> 32) & 0xFFFFFFFF]
        entropy += [_stream_key(s) for s in self.stream]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, *stream) -> Rng:
        return Rng(self.seed, self.stream + tuple(stream))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, std, size=shape)

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def dirichlet(self, alpha, size=None) -> np.ndarray:
        return self.generator.dirichlet(alpha, size=size)

    def choice(self, a, size=None, replace: bool = True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)


# ----------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], n_samples: int = 20,
               eps: float = 1e-5, rng: Rng | None = None,
               coords: Sequence[tuple[int, tuple]] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments and must read ``params`` by reference.
    Coordinates are sampled uniformly per parameter (``n_samples`` each) unless
    ``coords`` gives explicit ``(param_index, index_tuple)`` pairs. The relative
    error of a coordinate is ``|a - fd| / (|a| + |fd| + 1e-12)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if coords is None:
        rng = rng or Rng(0, ("grad_check",))
        coords = []
        for k, p in enumerate(params):
            for _ in range(n_samples):
                coords.append((k, tuple(int(rng.integers(0, n)) for n in p.shape)))

    worst = 0.0
    for k, idx in coords:
        p = params[k]
        orig = p.data[idx]
        p.data[idx] = orig + eps
        up = float(f().data)
        p.data[idx] = orig - eps
        down = float(f().data)
        p.data[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError("grad_check: non-finite loss under perturbation")
        fd = (up - down) / (2.0 * eps)
        a = float(analytic[k][idx])
        worst = max(worst, abs(a - fd) / (abs(a) + abs(fd) + 1e-12))
    for p in params:
        p.zero_grad()
    return worst
