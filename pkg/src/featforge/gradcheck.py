"""Central finite-difference gradient checks against the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(f: Callable[[], Tensor], t: Tensor, idx, step: float = 1e-5) -> float:
    """d f / d t[idx] by central differences; ``t`` is restored afterwards."""
    old = t.data[idx]
    t.data[idx] = old + step
    hi = f().item()
    t.data[idx] = old - step
    lo = f().item()
    t.data[idx] = old
    return (hi - lo) / (2 * step)


def analytic_grads(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    T.zero_grad(tensors)
    T.backward(f())
    out = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    T.zero_grad(tensors)
    return out


def max_rel_error(f: Callable[[], Tensor], tensors: Sequence[Tensor], step: float = 1e-5,
                  max_coords: int | None = None, rng: np.random.Generator | None = None,
                  analytic: Callable[[], list[np.ndarray]] | None = None) -> float:
    """Largest relative gap between analytic and numeric gradients.

    Per tensor the gap is ``max |a - n| / max(max |a|, max |n|, 1e-8)``
    over the checked coordinates; ``max_coords`` samples that many entries
    per tensor (all entries when ``None``). ``analytic`` overrides how the
    analytic gradients are obtained (default: one backward of ``f()``).
    """
    for t in tensors:
        t.data = np.array(t.data, dtype=np.float64)  # own, writable buffers
    grads = analytic() if analytic is not None else analytic_grads(f, tensors)
    worst = 0.0
    for t, a in zip(tensors, grads):
        flat = list(np.ndindex(t.shape)) if t.ndim else [()]
        if max_coords is not None and len(flat) > max_coords:
            rng = rng or np.random.default_rng(0)
            flat = [flat[i] for i in rng.choice(len(flat), max_coords, replace=False)]
        num = np.array([numeric_grad(f, t, i, step) for i in flat])
        ana = np.array([a[i] for i in flat])
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0)) / scale)
    return worst
