"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Define-by-run: ops executed while a Tape is active are recorded and replayed
in reverse by ``backward``. The operator set is exactly what the models in
this repo need (linear maps, residual MLPs with GELU, LayerNorm, L2 rows,
symmetric InfoNCE head, elementwise arithmetic, concat). No broadcasting
beyond row-wise bias/affine.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 tensor. Values are immutable once produced by an op."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "parents", "grad_fns")

    def __init__(self, out, parents, grad_fns):
        self.out = out
        self.parents = parents
        self.grad_fns = grad_fns


class Tape:
    """Ordered record of ops for one forward pass. Not thread-shared."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, parents, grad_fns):
        self.nodes.append(_Node(out, list(parents), list(grad_fns)))
        self._tracked.add(id(out))


_TAPES: list[Tape] = []


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(data, parents, grad_fns) -> Tensor:
    """Wrap an op result, recording it when a tape is active and relevant."""
    if not np.all(np.isfinite(data)):
        raise NumericError("operation produced non-finite values")
    out = Tensor(data)
    tape = _active()
    if tape is not None and any(tape._tracks(p) for p in parents):
        tape.record(out, parents, grad_fns)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    Accumulation is the sum over all paths; each node is visited once, in
    reverse topological (= recording) order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, fn in zip(node.parents, node.grad_fns):
            if fn is None or not tape._tracks(parent):
                continue
            pg = fn(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        if node.out.requires_grad:
            node.out.grad = g
    for node in tape.nodes:
        for parent in node.parents:
            if parent.requires_grad and id(parent) in grads:
                pg = grads[id(parent)]
                parent.grad = pg if parent.grad is None else parent.grad + pg
                del grads[id(parent)]
    if loss.requires_grad and loss.grad is None:
        loss.grad = np.ones_like(loss.data)


# ---------------------------------------------------------------------------
# operator set
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _emit(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _emit(x.data.T.copy(), (x,), (lambda g: g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    return _emit(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    return _emit(a.data * b.data, (a, b),
                 (lambda g: g * b.data, lambda g: g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(x.data * c, (x,), (lambda g: g * c,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: x[n,d] + b[d]."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias shapes incompatible: {x.shape} + {b.shape}")
    return _emit(x.data + b.data[None, :], (x, b),
                 (lambda g: g, lambda g: g.sum(axis=0)))


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of x by a scalar tensor (e.g. 1/tau)."""
    if s.data.size != 1:
        raise ShapeError(f"mul_scalar expects scalar, got {s.shape}")
    sv = float(s.data.reshape(-1)[0])
    return _emit(x.data * sv, (x, s),
                 (lambda g: g * sv,
                  lambda g: np.array(np.sum(g * x.data)).reshape(s.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), (lambda g: g * out,))


def reciprocal(x: Tensor) -> Tensor:
    if np.any(x.data == 0.0):
        raise DegenerateInputError("reciprocal of zero")
    out = 1.0 / x.data
    return _emit(out, (x,), (lambda g: -g * out * out,))


def sum_all(x: Tensor) -> Tensor:
    return _emit(np.array(x.data.sum()), (x,),
                 (lambda g: np.broadcast_to(g, x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _emit(np.array(x.data.mean()), (x,),
                 (lambda g: np.broadcast_to(g / n, x.shape).copy(),))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    out = x.data * cdf
    return _emit(out, (x,), (lambda g: g * (cdf + x.data * pdf),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (population variance) with affine gamma/beta."""
    if x.data.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"layer_norm expects n x d with d >= 1, got {x.shape}")
    d = x.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match d={d}")
    if eps < 0:
        raise ContractError("layer_norm eps must be >= 0")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[None, :] + beta.data[None, :]

    def grad_x(g):
        gh = g * gamma.data[None, :]
        return inv * (gh - gh.mean(axis=1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=1, keepdims=True))

    return _emit(out, (x, gamma, beta),
                 (grad_x,
                  lambda g: (g * xhat).sum(axis=0),
                  lambda g: g.sum(axis=0)))


def l2_normalize(x: Tensor) -> Tensor:
    """Unit-norm rows of an n x d matrix."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects n x d, got {x.shape}")
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise DegenerateInputError(f"zero-norm row at index {int(zero[0])}")
    out = x.data / norms

    def grad_x(g):
        dot = (g * x.data).sum(axis=1, keepdims=True)
        return g / norms - x.data * (dot / norms**3)

    return _emit(out, (x,), (grad_x,))


def concat_cols(tensors: list[Tensor]) -> Tensor:
    """Concatenate matrices along columns; backward splits the gradient."""
    n = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != n:
            raise ShapeError(f"concat_cols row mismatch: {[t.shape for t in tensors]}")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def make_split(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi].copy()

    return _emit(out, tuple(tensors), tuple(make_split(i) for i in range(len(tensors))))
