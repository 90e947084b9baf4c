import numpy as np
import pytest

from layoutedit.tensor import Tensor


def fd_grad(fn, arr: np.ndarray, step: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar fn w.r.t. every entry of arr."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom))


def assert_grad_matches(build_scalar, leaf: Tensor, tol: float = 1e-4):
    """build_scalar() must recompute the scalar Tensor from leaf.data."""
    leaf.grad = None
    out = build_scalar()
    out.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    numeric = fd_grad(lambda: build_scalar().item(), leaf.data)
    assert rel_err(analytic, numeric) < tol


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
