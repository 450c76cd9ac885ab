"""Central-difference gradient verification.

The checker never looks at the adjoint code it validates: it re-evaluates
the forward computation at perturbed inputs and compares the resulting
difference quotients with the tape's analytic gradients.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .numerics import Matrix, Tape

LossBuilder = Callable[[Mapping[str, Matrix]], Matrix]


def numeric_grads(
    make_loss: LossBuilder,
    arrays: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, np.ndarray]:
    """Central finite differences of ``make_loss`` w.r.t. every array entry.

    ``make_loss`` must rebuild the computation from scratch from the given
    matrices and return a 1x1 loss node.
    """
    grads: dict[str, np.ndarray] = {}
    base = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss({k: Matrix(v) for k, v in base.items()}).item()
            flat[i] = orig - h
            down = make_loss({k: Matrix(v) for k, v in base.items()}).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def analytic_grads(
    make_loss: LossBuilder,
    arrays: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Tape gradients of ``make_loss`` w.r.t. every named array."""
    mats = {k: Matrix(v) for k, v in arrays.items()}
    with Tape() as tape:
        for m in mats.values():
            tape.watch(m)
        loss = make_loss(mats)
        grads = tape.backward(loss)
    return {k: np.array(grads[m].to_numpy()) for k, m in mats.items()}


def max_relative_error(
    make_loss: LossBuilder,
    arrays: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Worst-case |analytic - numeric| / (|analytic| + 1e-8) over all entries."""
    ana = analytic_grads(make_loss, arrays)
    num = numeric_grads(make_loss, arrays, h=h)
    worst = 0.0
    for name in arrays:
        denom = np.abs(ana[name]) + 1e-8
        err = np.abs(ana[name] - num[name]) / denom
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
