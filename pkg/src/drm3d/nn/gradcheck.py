"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np


def numeric_gradient(param, loss_fn, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` (a float) w.r.t. every entry of ``param``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        out[i] = (up - down) / (2.0 * h)
    return out.reshape(param.shape)


def relative_error(numeric: np.ndarray, analytic: np.ndarray, floor: float = 1e-6) -> float:
    """``|fd - bp| / max(|fd|, |bp|, floor)`` with L2 norms over the whole tensor.

    Measuring per tensor rather than per entry keeps entries whose true
    gradient is zero (for instance key biases, which softmax cancels) from
    turning round-off into huge ratios; ``floor`` does the same for tensors
    that are entirely disconnected.
    """
    num = float(np.linalg.norm(numeric - analytic))
    den = max(float(np.linalg.norm(numeric)), float(np.linalg.norm(analytic)), floor)
    return num / den


def check_gradients(named_params, loss_fn, h: float = 1e-5, floor_rel: float = 1e-5) -> dict[str, float]:
    """Relative error per parameter. ``loss_fn(backward)`` builds the graph and returns the loss.

    It is called once with ``backward=True`` (after gradients are zeroed) to
    populate analytic gradients, then repeatedly with ``backward=False``.
    Round-off in the differenced loss grows with ``|loss|``, so the norm floor
    is ``floor_rel * max(1, |loss|)``: gradients below it count as zero.
    """
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = np.zeros_like(p.data)
    value = loss_fn(True)
    floor = floor_rel * max(1.0, abs(value))
    analytic = {n: p.grad.copy() for n, p in named_params}
    return {n: relative_error(numeric_gradient(p, lambda: loss_fn(False), h), analytic[n], floor)
            for n, p in named_params}
