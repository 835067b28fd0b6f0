"""Shared test helpers: finite differences and error measures."""

from __future__ import annotations

import numpy as np

from lipsynth.engine import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f at x (x is mutated in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def fd_check(fn, arrays, h: float = 1e-6) -> float:
    """Max relative error between autodiff and numeric grads of scalar fn(*tensors).

    arrays: list of float64 ndarrays; every one is checked.
    """
    ts = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    loss = fn(*ts)
    loss.backward()
    worst = 0.0
    base = [t.data for t in ts]
    for i in range(len(arrays)):
        def f_i(x, i=i):
            args = [Tensor(b) for b in base]
            args[i] = Tensor(x)
            return float(fn(*args).data)

        num = numeric_grad(f_i, base[i].copy(), h)
        ana = ts[i].grad
        assert ana is not None, f"missing gradient for argument {i}"
        worst = max(worst, rel_err(ana, num))
    return worst
