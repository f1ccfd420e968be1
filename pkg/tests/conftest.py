"""Shared oracles for the test suite."""

import numpy as np

from cmssl.tensor import Tensor


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error between gradient arrays."""
    denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / denom)


def assert_grad_matches(build_loss, arrays, tol: float = 1e-4, h: float = 1e-5):
    """Check analytic grads of build_loss(*tensors) against central differences.

    build_loss must be deterministic and accept Tensors positionally. Every
    array in `arrays` is treated as a differentiable input.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()
    for idx, (t, a) in enumerate(zip(tensors, arrays)):
        def f(x, _idx=idx):
            args = [Tensor(arr.copy()) for arr in arrays]
            args[_idx] = Tensor(x)
            return build_loss(*args).item()

        numeric = finite_difference_grad(f, a.copy(), h=h)
        err = max_rel_error(t.grad, numeric)
        assert err < tol, f"input {idx}: analytic/FD gradient mismatch, rel err {err:.3e}"
