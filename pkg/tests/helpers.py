"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from peerkd.tensor import Tensor, backward

FD_H = 1e-5
FD_TOL = 1e-4


def rel_err(a, b):
    """max |a-b| / max(|a|,|b|,1e-8), elementwise max over the arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max())


def fd_gradcheck(fn, arrays, tol=FD_TOL, h=FD_H):
    """Compare tape gradients of ``fn`` against central finite differences.

    ``fn`` maps a list of float64 Tensors to a scalar Tensor and must build a
    fresh graph each call. Returns the worst relative error across inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(mats):
        return float(fn([Tensor(m, requires_grad=False) for m in mats]).data)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(fn(leaves))
    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = leaves[i].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            mats = [a.copy() for a in arrays]
            mats[i].reshape(-1)[j] = flat[j] + h
            up = value(mats)
            mats[i].reshape(-1)[j] = flat[j] - h
            down = value(mats)
            num_flat[j] = (up - down) / (2 * h)
        err = rel_err(analytic, numeric)
        worst = max(worst, err)
        assert err <= tol, f"input {i}: relative error {err:.3e} > {tol}"
    return worst
