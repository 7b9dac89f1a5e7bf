"""Gauss-Newton nonlinear least squares for ``y ~ m(w, z, beta)``."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .exceptions import ConvergenceError
from .models import ModelSpec


class NLSResult(NamedTuple):
    beta: np.ndarray
    iterations: int
    grad_norm: float
    sse: float


def linear_start(w, z, y) -> np.ndarray:
    """OLS of ``y`` on ``(w, w^2, z)``; exact for the quadratic family."""
    X = np.column_stack([w, w * w, z])
    return np.linalg.lstsq(X, y, rcond=None)[0]


def gauss_newton(w, z, y, spec: ModelSpec, init=None, grad_tol: float | None = None,
                 max_iter: int = 200) -> NLSResult:
    """Minimise ``sum (y - m(w, z, beta))^2`` with step halving.

    Converged when ``||J^T e||_inf < grad_tol`` (default ``1e-8 n``).
    """
    w = np.asarray(w, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.asarray(y, dtype=float)
    n = len(y)
    grad_tol = 1e-8 * n if grad_tol is None else grad_tol
    beta = linear_start(w, z, y) if init is None else np.asarray(init, dtype=float).copy()
    mean = spec.mean
    e = y - mean(w, z, beta)
    sse = float(e @ e)
    trace = []
    for it in range(1, max_iter + 1):
        J = mean.gradient(w, z, beta)
        g = J.T @ e
        gnorm = float(np.max(np.abs(g)))
        trace.append((it, sse, gnorm))
        if gnorm < grad_tol:
            return NLSResult(beta, it - 1, gnorm, sse)
        step = np.linalg.lstsq(J, e, rcond=None)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            e_c = y - mean(w, z, cand)
            sse_c = float(e_c @ e_c)
            if sse_c < sse:
                break
            t *= 0.5
        else:
            # no decrease at any step size: at the floating-point floor
            if gnorm < 1e-5 * n * max(1.0, sse / n):
                return NLSResult(beta, it, gnorm, sse)
            raise ConvergenceError("Gauss-Newton stalled", trace)
        beta, e, sse = cand, e_c, sse_c
    J = mean.gradient(w, z, beta)
    gnorm = float(np.max(np.abs(J.T @ e)))
    if gnorm < grad_tol:
        return NLSResult(beta, max_iter, gnorm, sse)
    raise ConvergenceError(f"Gauss-Newton did not converge in {max_iter} iterations", trace)
