"""Central finite differences, used as an independent oracle for backward rules."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[np.ndarray], float], params, eps: float = 1e-5) -> np.ndarray:
    """Estimate grad f at ``params`` by (f(p+eps e_i) - f(p-eps e_i)) / (2 eps)."""
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(p.copy()))
        flat[i] = orig - eps
        lo = float(f(p.copy()))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the flattened vectors."""
    a = np.ravel(analytic).astype(np.float64)
    n = np.ravel(numeric).astype(np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


@dataclass
class GradCheckResult:
    rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float) -> bool:
        return self.rel_error < tol


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_coords: int | None = 24,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare backward() against central differences for ``loss_fn``.

    ``loss_fn`` must be deterministic (re-seed any RNG inside it). Large
    tensors are checked on ``max_coords`` randomly chosen coordinates each,
    plus one random direction over all parameters jointly.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic_full = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    analytic, numeric = [], []
    for p, g in zip(params, analytic_full):
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = value()
            flat[i] = orig - eps
            lo = value()
            flat[i] = orig
            numeric.append((hi - lo) / (2 * eps))
            analytic.append(g.reshape(-1)[i])

    # joint random direction
    dirs = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs)) or 1.0
    dirs = [d / norm for d in dirs]
    saved = [p.data.copy() for p in params]
    for p, d, s in zip(params, dirs, saved):
        p.data = (s + eps * d).astype(s.dtype)
    hi = value()
    for p, d, s in zip(params, dirs, saved):
        p.data = (s - eps * d).astype(s.dtype)
    lo = value()
    for p, s in zip(params, saved):
        p.data = s
    numeric.append((hi - lo) / (2 * eps))
    analytic.append(sum(float(np.sum(g * d)) for g, d in zip(analytic_full, dirs)))

    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return GradCheckResult(relative_error(a, n), a, n)
