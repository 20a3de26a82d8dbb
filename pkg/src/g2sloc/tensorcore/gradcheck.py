"""Central-difference gradient checking for tape-recorded functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tape import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case elementwise relative error with a small-value floor."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(
    func: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    step: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
) -> float:
    """Compare tape gradients of ``func`` against central differences.

    ``func`` receives one leaf Tensor per input array (recorded on a fresh
    tape each evaluation) and must return a scalar Tensor.  Returns the
    worst relative error over all inputs; raises AssertionError above tol.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    loss = func(*leaves)
    grads = tape.backward(loss)
    analytic = [grads.of(leaf) for leaf in leaves]

    def evaluate(perturbed):
        probe_tape = Tape()
        probe_leaves = [probe_tape.leaf(a) for a in perturbed]
        return float(func(*probe_leaves).data)

    worst = 0.0
    for which, array in enumerate(arrays):
        numeric = np.zeros_like(array)
        flat = numeric.reshape(-1)
        for i in range(array.size):
            bumped = [a.copy() for a in arrays]
            bumped[which].reshape(-1)[i] += step
            up = evaluate(bumped)
            bumped[which].reshape(-1)[i] -= 2 * step
            down = evaluate(bumped)
            flat[i] = (up - down) / (2.0 * step)
        err = relative_error(analytic[which], numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient check failed for input {which}: relative error {err:.3e} > {tol:.1e}"
            )
    return worst
