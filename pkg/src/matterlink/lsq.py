"""Box-constrained linear least squares.

A small primal active-set solver (Lawson-Hanson style, generalised to two
bounds) for min ||A x - b||^2 subject to lo <= x <= hi. It accepts a warm
start whose bound pattern seeds the active set, which is what makes
sequential waveform synthesis cheap.
"""
from dataclasses import dataclass

import numpy as np


@dataclass
class LsqResult:
    x: np.ndarray
    cost: float
    iterations: int
    converged: bool
    at_bound: np.ndarray  # -1 lower, +1 upper, 0 free


def _solve_free(A, b, x, free):
    rhs = b - A[:, ~free] @ x[~free]
    z = x.copy()
    if free.any():
        z[free] = np.linalg.lstsq(A[:, free], rhs, rcond=None)[0]
    return z


def bounded_lstsq(A, b, lo=-np.inf, hi=np.inf, x0=None, max_iter=None, tol=1e-12):
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("lower bound exceeds upper bound")
    max_iter = max_iter or 10 * n + 20

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    x = np.clip(x, lo, hi)
    state = np.zeros(n, dtype=int)
    width = hi - lo
    span = np.where(np.isfinite(width), np.maximum(width, 1.0), 1.0)
    state[np.isfinite(lo) & (x <= lo + 1e-12 * span)] = -1
    state[np.isfinite(hi) & (x >= hi - 1e-12 * span)] = 1
    x[state == -1] = lo[state == -1]
    x[state == 1] = hi[state == 1]

    it = 0
    converged = False
    while it < max_iter:
        it += 1
        free = state == 0
        z = _solve_free(A, b, x, free)
        viol = free & ((z < lo) | (z > hi))
        if viol.any():
            # walk from the feasible x toward z until the first bound is hit
            d = z - x
            with np.errstate(divide="ignore", invalid="ignore"):
                alpha_lo = np.where(viol & (z < lo), (lo - x) / d, np.inf)
                alpha_hi = np.where(viol & (z > hi), (hi - x) / d, np.inf)
            alpha = float(np.clip(min(alpha_lo.min(), alpha_hi.min()), 0.0, 1.0))
            x = x + alpha * d
            hit_lo = free & (x <= lo + tol * span)
            hit_hi = free & (x >= hi - tol * span)
            x[hit_lo] = lo[hit_lo]
            x[hit_hi] = hi[hit_hi]
            state[hit_lo] = -1
            state[hit_hi] = 1
            if not (hit_lo.any() or hit_hi.any()):
                j = np.flatnonzero(viol)[0]
                state[j] = -1 if z[j] < lo[j] else 1
                x[j] = lo[j] if state[j] < 0 else hi[j]
            continue
        x = z
        grad = A.T @ (A @ x - b)
        # a bound is worth releasing when the gradient points into the box
        release = np.where(state == -1, -grad, 0.0) + np.where(state == 1, grad, 0.0)
        scale = max(np.abs(grad).max(), np.abs(A.T @ b).max(), 1e-300)
        j = int(np.argmax(release))
        if release[j] <= tol * scale:
            converged = True
            break
        state[j] = 0

    cost = float(np.sum((A @ x - b) ** 2))
    return LsqResult(x, cost, it, converged, state.copy())
