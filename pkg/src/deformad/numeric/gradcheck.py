"""Finite-difference gradient verification for tape-recorded functions."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, precision


def numerical_gradient(f, arrays, index, eps=1e-5):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[index]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = float(f(*arrays))
        flat[i] = saved - eps
        lo = float(f(*arrays))
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(build_loss, arrays, eps=1e-5, rel_tol=1e-4, floor=1e-8):
    """Compare tape gradients of build_loss(*tensors) against finite differences.

    ``build_loss`` receives one Tensor per input array and must return a
    scalar Tensor. Runs in 64-bit mode regardless of the global setting.
    Returns the worst relative error seen across all inputs.
    """
    with precision(64):
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True)
                   for a in arrays]
        with Tape():
            loss = build_loss(*tensors)
        backward(loss)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                    for t in tensors]

        def forward(*raw):
            ts = [Tensor(r) for r in raw]
            return build_loss(*ts).item()

        worst = 0.0
        for i in range(len(arrays)):
            numeric = numerical_gradient(forward, [t.data for t in tensors],
                                         i, eps=eps)
            err = max_relative_error(analytic[i], numeric, floor=floor)
            worst = max(worst, err)
    if worst > rel_tol:
        raise AssertionError(f"gradient check failed: max rel err {worst:.3e} "
                             f"> {rel_tol:.1e}")
    return worst
