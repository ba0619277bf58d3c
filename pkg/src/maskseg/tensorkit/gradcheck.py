"""Central finite-difference gradient oracle."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

ABS_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                      max_coords: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None,
                      return_details: bool = False):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated after each in-place perturbation of an input's data,
    so it must close over ``inputs``. ``max_coords`` caps how many coordinates
    per input are probed (sampled without replacement by ``rng``).
    """
    for t in inputs:
        t.grad = None
        if t.data.dtype != np.float64:
            raise TypeError("finite_diff_check needs double-precision inputs")
    loss = f()
    if loss.data.size != 1:
        raise ValueError("finite_diff_check needs a scalar-valued function")
    backward(loss)
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    details = []
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        with no_grad():
            for j, idx in enumerate(coords):
                orig = flat[idx]
                flat[idx] = orig + h
                fp = float(f().data)
                flat[idx] = orig - h
                fm = float(f().data)
                flat[idx] = orig
                numeric[j] = (fp - fm) / (2.0 * h)
        err = relative_error(analytic.reshape(-1)[coords], numeric)
        e = float(err.max()) if err.size else 0.0
        worst = max(worst, e)
        details.append(e)
    return (worst, details) if return_details else worst
