"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

DENOM_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = DENOM_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
              samples_per_input: Optional[int] = None, seed: int = 0, floor: float = DENOM_FLOOR) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` is re-evaluated after each perturbation, so it must read the
    current ``.data`` of ``inputs``. Non-scalar outputs are reduced to
    ``sum(out * R)`` with a fixed random ``R``. With ``samples_per_input`` only
    that many random entries of each input are perturbed.
    """
    rng = np.random.default_rng(seed)
    out = fn()
    weights = rng.normal(size=out.shape) / np.sqrt(max(out.size, 1))

    def scalar() -> float:
        return float(np.sum(fn().data * weights))

    for t in inputs:
        t.grad = None
    (fn() * weights).sum().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat_idx = np.arange(t.data.size)
        if samples_per_input is not None and samples_per_input < t.data.size:
            flat_idx = rng.choice(t.data.size, size=samples_per_input, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            up = scalar()
            t.data[idx] = orig - step
            down = scalar()
            t.data[idx] = orig
            numeric = (up - down) / (2 * step)
            err = float(relative_error(np.array(analytic[idx]), np.array(numeric), floor))
            worst = max(worst, err)
    return worst
