"""Central finite differences, used as the independent oracle for tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor

FD_STEP = 1e-6


def numerical_grad(loss_fn: Callable[[], Tensor], param: Tensor, step: float = FD_STEP) -> np.ndarray:
    """d loss / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn().data)
        flat[i] = orig - step
        down = float(loss_fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def tape_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    return tape.backward(loss, params)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(|a|, |b|, 1e-8) over all entries, as a single scalar."""
    denom = max(float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)), 1e-8)
    return float(np.abs(a - b).max(initial=0.0)) / denom


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    step: float = FD_STEP) -> dict[str, float]:
    """Relative error between tape and finite-difference gradients, per parameter."""
    analytic = tape_grads(loss_fn, params)
    return {name: relative_error(analytic[name], numerical_grad(loss_fn, p, step)) for name, p in params.items()}
