"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad_at(f: Callable[[], float], array: np.ndarray, index: tuple, h: float = 1e-6) -> float:
    """d f / d array[index] by central differences; ``array`` is perturbed in place."""
    old = array[index]
    array[index] = old + h
    plus = f()
    array[index] = old - h
    minus = f()
    array[index] = old
    return (plus - minus) / (2 * h)


def check_points(f: Callable[[], float], array: np.ndarray, analytic: np.ndarray, n_points: int,
                 rng: np.random.Generator, h: float = 1e-6) -> list[tuple[tuple, float, float, float]]:
    """Compare ``analytic`` against central differences at ``n_points`` random
    entries. Returns (index, analytic, numeric, relative error) rows."""
    rows = []
    flat = rng.choice(array.size, size=min(n_points, array.size), replace=False)
    for k in flat:
        idx = np.unravel_index(int(k), array.shape)
        num = numeric_grad_at(f, array, idx, h)
        a = float(analytic[idx])
        rows.append((idx, a, num, relative_error(a, num)))
    return rows
