"""Central finite-difference checks for the autodiff ops."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-4
REL_TOL = 1e-4


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f()
        x[i] = old - step
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(num / den)


def check(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray],
          step: float = STEP) -> float:
    """Worst relative error between autodiff and finite differences over all inputs.

    ``build`` maps leaf tensors to a scalar tensor. A fixed random projection
    turns non-scalar outputs into a scalar.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(leaves)
    w = np.random.default_rng(12345).normal(size=out.shape)

    def scalar(o: Tensor) -> Tensor:
        return o if o.data.size == 1 else T.sum(T.mul(o, Tensor(w)))

    scalar(out).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        probe = arr.copy()

        def f():
            ins = [Tensor(probe) if l is leaf else Tensor(l.data) for l in leaves]
            with T.no_grad():
                return float(scalar(build(ins)).data)

        num = numerical_grad(f, probe, step)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, rel_error(ana, num))
    return worst


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """One random instance per differentiable op: name -> (build, inputs)."""
    tgt = rng.integers(0, 5, size=(3,))
    mask = np.array([True, False, True])
    idx = rng.integers(0, 4, size=(2, 3))
    rows = np.array([[2, 0], [1, 1]])
    return {
        "matmul": (lambda t: T.matmul(t[0], t[1]), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
        "matmul_batched": (lambda t: T.matmul(t[0], t[1]),
                           [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        "matmul_broadcast": (lambda t: T.matmul(t[0], t[1]),
                             [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]),
        "add_broadcast": (lambda t: T.add(t[0], t[1]), [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        "sub": (lambda t: T.sub(t[0], t[1]), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]),
        "mul": (lambda t: T.mul(t[0], t[1]), [rng.normal(size=(3, 4)), rng.normal(size=(1, 4))]),
        "scale": (lambda t: T.scale(t[0], -1.7), [rng.normal(size=(5,))]),
        "gelu": (lambda t: T.gelu(t[0]), [rng.normal(size=(4, 3))]),
        "layer_norm": (lambda t: T.layer_norm(t[0], t[1], t[2]),
                       [rng.normal(size=(3, 5)), rng.normal(size=(5,)), rng.normal(size=(5,))]),
        "softmax": (lambda t: T.softmax(t[0], 0.7), [rng.normal(size=(3, 5))]),
        "log_softmax": (lambda t: T.log_softmax(t[0]), [rng.normal(size=(3, 5))]),
        "kl_divergence": (lambda t: T.kl_divergence(T.softmax(t[0]), T.softmax(t[1], 1.5)),
                          [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))]),
        "cross_entropy": (lambda t: T.cross_entropy(t[0], tgt, mask), [rng.normal(size=(3, 5))]),
        "embedding": (lambda t: T.embedding(t[0], idx), [rng.normal(size=(4, 3))]),
        "take_rows": (lambda t: T.take_rows(t[0], rows), [rng.normal(size=(2, 3, 2))]),
        "concat": (lambda t: T.concat([t[0], t[1]], axis=1),
                   [rng.normal(size=(2, 2, 3)), rng.normal(size=(2, 1, 3))]),
        "reshape_transpose": (lambda t: T.transpose(T.reshape(t[0], (2, 3, 2)), (0, 2, 1)),
                              [rng.normal(size=(3, 4))]),
        "sum_mean": (lambda t: T.add(T.sum(t[0], axis=0), T.mean(t[0], axis=0)), [rng.normal(size=(3, 4))]),
    }


def run_suite(instances: int = 50, seed: int = 0) -> dict[str, float]:
    """Worst relative error per op over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(instances):
        for name, (build, arrays) in op_cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check(build, arrays))
    return worst
