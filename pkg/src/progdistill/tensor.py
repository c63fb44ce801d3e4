"""Reverse-mode autodiff over float64 numpy arrays.

A define-by-run tape: every op builds an output :class:`Tensor` holding its
parents and a closure that pushes the output gradient back to them. Calling
:meth:`Tensor.backward` on a scalar walks the graph once in reverse
topological order. Gradients accumulate on leaves until :meth:`Tensor.zero_grad`
(or :meth:`Adam.zero_grad`) clears them.

Non-finite values are rejected at every op boundary.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Adam",
    "NonFiniteError",
    "Tensor",
    "add",
    "concat",
    "cross_entropy",
    "embedding",
    "gelu",
    "grad_enabled",
    "kl_divergence",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "softmax",
    "sub",
    "sum",
    "take_rows",
    "transpose",
]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op

    # construction helpers -------------------------------------------------

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        # grads are never mutated in place, so sharing the incoming array is safe
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # autodiff -------------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(self.data)

        # iterative DFS post-order -> topological order
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor._result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor._result(a.data * s, (a,), "scale")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g * s)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = Tensor._result(0.5 * x * (1.0 + th), (a,), "gelu")
    if out.requires_grad:
        def _bw(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
            d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
            a._accumulate(g * d)
        out._backward = _bw
    return out


# shape ---------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor._result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(np.transpose(g, inv))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat")
    if out.requires_grad:
        sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _bw(g):
            for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = _bw
    return out


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch gather along axis 1: ``out[b, j] = x[b, index[b, j]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ValueError(f"take_rows: bad shapes x={x.shape} index={index.shape}")
    b = np.arange(x.shape[0])[:, None]
    out = Tensor._result(x.data[b, index], (x,), "take_rows")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(x.data)
            np.add.at(full, (b, index), g)
            x._accumulate(full)
        out._backward = _bw
    return out


def embedding(weight: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``weight[index]`` for an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= weight.shape[0]):
        raise IndexError("embedding: index out of range")
    out = Tensor._result(weight.data[index], (weight,), "embedding")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(weight.data)
            np.add.at(full, index.reshape(-1), g.reshape(-1, weight.shape[1]))
            weight._accumulate(full)
        out._backward = _bw
    return out


# reductions ----------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor._result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # fold batch dims into rows: one GEMM instead of many small ones
        a2 = a.data.reshape(-1, a.shape[-1])
        out = Tensor._result((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],)), (a, b), "matmul")
        if out.requires_grad:
            def _bw(g):
                g2 = g.reshape(-1, b.shape[1])
                if a.requires_grad:
                    a._accumulate((g2 @ b.data.T).reshape(a.shape))
                if b.requires_grad:
                    b._accumulate(a2.T @ g2)
            out._backward = _bw
        return out
    out = Tensor._result(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if gamma is not None:
        y = y * gamma.data
    if beta is not None:
        y = y + beta.data
    parents = [t for t in (x, gamma, beta) if t is not None]
    out = Tensor._result(y, parents, "layer_norm")
    if out.requires_grad:
        n = x.shape[-1]

        def _bw(g):
            if gamma is not None and gamma.requires_grad:
                gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
            if beta is not None and beta.requires_grad:
                beta._accumulate(_unbroadcast(g, beta.shape))
            if x.requires_grad:
                gx = g * gamma.data if gamma is not None else g
                dx = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                                - xhat * (gx * xhat).sum(-1, keepdims=True))
                x._accumulate(dx)
        out._backward = _bw
    return out


# probability ---------------------------------------------------------------


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    p = _softmax_np(logits.data / temperature, axis)
    out = Tensor._result(p, (logits,), "softmax")
    if out.requires_grad:
        def _bw(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            logits._accumulate(p * (g - dot) / temperature)
        out._backward = _bw
    return out


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    lp = z - lse
    out = Tensor._result(lp, (logits,), "log_softmax")
    if out.requires_grad:
        def _bw(g):
            logits._accumulate(g - np.exp(lp) * g.sum(axis=axis, keepdims=True))
        out._backward = _bw
    return out


def kl_divergence(p: Tensor, q: Tensor, atol: float = 1e-6) -> Tensor:
    """KL(p || q) summed over the last axis and averaged over the rest.

    Terms with ``p == 0`` contribute nothing. Both inputs must be
    distributions along the last axis.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shape mismatch {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if (t.data < 0).any() or not np.allclose(t.data.sum(-1), 1.0, atol=atol, rtol=0):
            raise ValueError(f"kl_divergence: {name} is not a distribution over the last axis")
    support = p.data > 0
    if (q.data[support] <= 0).any():
        raise ValueError("kl_divergence: q has zero mass where p > 0")
    ps = np.where(support, p.data, 1.0)
    qs = np.where(support, q.data, 1.0)
    terms = np.where(support, p.data * (np.log(ps) - np.log(qs)), 0.0)
    rows = terms.size // p.shape[-1]
    val = terms.sum() / rows
    out = Tensor._result(np.array(val), (p, q), "kl_divergence")
    if out.requires_grad:
        def _bw(g):
            if p.requires_grad:
                gp = np.where(support, np.log(ps) - np.log(qs) + 1.0, 0.0)
                p._accumulate(g * gp / rows)
            if q.requires_grad:
                q._accumulate(g * np.where(support, -p.data / qs, 0.0) / rows)
        out._backward = _bw
    return out


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over masked-in positions.

    ``logits`` has shape ``[..., V]``; ``targets`` and ``mask`` match the
    leading dims.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise ValueError("cross_entropy: mask shape mismatch")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: empty mask")
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= V):
        raise IndexError("cross_entropy: target out of vocabulary range")

    flat = logits.data.reshape(-1, V)
    fmask = mask.reshape(-1)
    ftgt = np.where(fmask, targets.reshape(-1), 0)
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(flat.shape[0]), ftgt]
    val = (nll * fmask).sum() / n
    out = Tensor._result(np.array(val), (logits,), "cross_entropy")
    if out.requires_grad:
        def _bw(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(flat.shape[0]), ftgt] -= 1.0
            p *= fmask[:, None] / n
            logits._accumulate(g * p.reshape(logits.shape))
        out._backward = _bw
    return out


# optimisation --------------------------------------------------------------


class Adam:
    """Adam with bias-corrected moments."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            _check_finite(p.data, "adam_step")

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
