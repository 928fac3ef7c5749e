"""Shared oracles for the test suite.

The gradient oracle is plain central finite differences evaluated on the
float64 path, independent of the autodiff implementation under test.
"""
from __future__ import annotations

import numpy as np
import pytest

from eiflow.tensorops import Tensor, backward


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-8)
    return float(np.abs(a - b).max(initial=0.0)) / denom


def fd_gradcheck(build, arrays: dict[str, np.ndarray], *, eps: float = 1e-6,
                 rtol: float = 1e-4) -> dict[str, float]:
    """Compare tape gradients of a scalar ``build(tensors)`` against central
    finite differences for every entry of every input array. Returns the
    per-input relative errors (and asserts they are below ``rtol``)."""
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    tensors = {k: Tensor(v.copy(), requires_grad=True, dtype=np.float64)
               for k, v in arrays.items()}
    loss = build(tensors)
    backward(loss)
    analytic = {
        k: (np.zeros_like(arrays[k]) if t.grad is None else np.asarray(t.grad, dtype=np.float64))
        for k, t in tensors.items()
    }

    def evaluate(current: dict[str, np.ndarray]) -> float:
        ts = {k: Tensor(v, dtype=np.float64) for k, v in current.items()}
        return float(build(ts).data)

    errors: dict[str, float] = {}
    for name, base in arrays.items():
        num = np.zeros_like(base)
        flat = base.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = evaluate(arrays)
            flat[i] = orig - eps
            lo = evaluate(arrays)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
        err = rel_error(analytic[name], num)
        errors[name] = err
        assert err < rtol, f"gradient mismatch for {name!r}: rel error {err:.3e}"
    return errors


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
