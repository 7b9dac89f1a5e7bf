"""Comparator estimators of ``zeta``: split conformal, direct kernel, naive."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import InvalidInputError, SingularMatrixError
from .models import CenterKind, CenterSpec, Dataset, ModelSpec
from .nls import gauss_newton
from .numerics import (KernelDesign, bisect_root, design_matrix, empirical_quantile,
                       gaussian_kernel, kde_at, nw_smoother, silverman_bandwidth)
from .semiparam import FittedBeta
from .zeta import ZetaEstimate, ZetaMethod


@dataclass(frozen=True, eq=False)
class SplitPlan:
    """Disjoint estimation / calibration index sets covering ``range(n)``."""

    estimation_indices: np.ndarray
    calibration_indices: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        est = np.sort(np.asarray(self.estimation_indices, dtype=int))
        cal = np.sort(np.asarray(self.calibration_indices, dtype=int))
        if len(cal) == 0:
            raise InvalidInputError("calibration set is empty")
        both = np.concatenate([est, cal])
        if len(np.unique(both)) != len(both):
            raise InvalidInputError("estimation and calibration indices overlap")
        if len(both) and (both.min() != 0 or both.max() != len(both) - 1):
            raise InvalidInputError("split indices must cover 0..n-1")
        object.__setattr__(self, "estimation_indices", est)
        object.__setattr__(self, "calibration_indices", cal)

    @property
    def n(self) -> int:
        return len(self.estimation_indices) + len(self.calibration_indices)

    @classmethod
    def random(cls, n: int, seed: int = 0, estimation_fraction: float = 0.5) -> "SplitPlan":
        if not 0 < estimation_fraction < 1:
            raise InvalidInputError("estimation_fraction must lie in (0, 1)")
        perm = np.random.default_rng(seed).permutation(n)
        k = int(round(estimation_fraction * n))
        return cls(perm[:k], perm[k:], seed)


class KernelCenter(CenterSpec):
    """Nadaraya-Watson regression of ``y`` on ``(w, z)``; ``beta`` is ignored."""

    kind = CenterKind.KERNEL_REGRESSION

    def __init__(self, data: Dataset, bandwidths=None, discrete=None):
        self.data = data
        self.design = KernelDesign.from_data(data, bandwidths, discrete)
        self._train = design_matrix(data.w, data.z)

    def values(self, w, z=None, beta=None):
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        shape = np.broadcast_shapes(w.shape, z.shape[:-1])
        wf = np.broadcast_to(w, shape).reshape(-1)
        zf = np.broadcast_to(z, shape + (z.shape[-1],)).reshape(-1, z.shape[-1])
        S, _ = nw_smoother(design_matrix(wf, zf), self._train, self.design)
        return (S @ self.data.y).reshape(shape)

    def beta_gradient(self, w, z, beta=None):
        shape = np.broadcast_shapes(np.shape(w), np.shape(z)[:-1])
        return np.zeros(shape + (0,))

    def smoother(self, exclude_self: bool = True) -> np.ndarray:
        """Smoothing matrix on the training rows (leave-one-out by default)."""
        S, _ = nw_smoother(self._train, self._train, self.design, exclude_self)
        return S

    def loo_values(self) -> np.ndarray:
        return self.smoother(True) @ self.data.y


CenterFitter = Callable[[Dataset], Callable]


def _center_function(fitted, spec_beta=None):
    """Normalise what a center fitter returns into ``f(w, z)``."""
    if isinstance(fitted, CenterSpec):
        return lambda w, z: fitted.values(w, z, spec_beta)
    return fitted


def conformal_fit(data: Dataset, alpha: float, plan: SplitPlan, center_fitter: CenterFitter,
                  spec: ModelSpec | None = None) -> ZetaEstimate:
    """Split conformal half-width.

    ``center_fitter(estimation_data)`` returns ``f(w, z) -> center``. The
    half-width is the ``ceil((1 - alpha) n_cal)``-th smallest calibration
    residual; its variance is ``alpha (1 - alpha) / (n_cal f^2)`` with a KDE
    of the calibration residuals for ``f``.
    """
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    if plan.n != data.n:
        raise InvalidInputError(f"split plan covers {plan.n} rows, data has {data.n}")
    n_cal = len(plan.calibration_indices)
    if n_cal < 10:
        raise InvalidInputError(f"calibration set needs at least 10 rows, got {n_cal}")
    center = _center_function(center_fitter(data.subset(plan.estimation_indices)))
    cal = data.subset(plan.calibration_indices)
    r = np.abs(cal.y - np.asarray(center(cal.w, cal.z), dtype=float))
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("center produced non-finite values on the calibration set")
    zeta = empirical_quantile(r, 1.0 - alpha)
    degenerate = bool(np.ptp(r) == 0)
    if degenerate:
        dens, var = math.inf, 0.0
    else:
        dens = kde_at(zeta, r)
        var = alpha * (1 - alpha) / (n_cal * dens ** 2)
    est = ZetaEstimate(zeta, ZetaMethod.CONFORMAL, var, dens, alpha,
                       {"n_calibration": n_cal, "n_estimation": len(plan.estimation_indices),
                        "seed": plan.seed, "degenerate": degenerate,
                        "calibration_coverage": float(np.mean(r <= zeta))})
    est.center = center
    return est


def direct_fit(data: Dataset, alpha: float, bandwidths=None, spec: ModelSpec | None = None,
               discrete=None, center_values=None, tol: float = 1e-9) -> ZetaEstimate:
    """Kernel-regression residuals with the efficient correction term.

    Solves ``sum_i [(1 - alpha) - I{r_i < zeta} - e_i d_i(zeta)] = 0`` where
    ``e_i = y_i - m(w_i, z_i)`` (leave-one-out kernel fit unless
    ``center_values`` is given) and ``d_i`` smooths ``K_h(zeta - r)`` over
    ``(w, z)``.
    """
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    if data.n < 30:
        raise InvalidInputError(f"direct_fit needs at least 30 rows, got {data.n}")
    kc = KernelCenter(data, bandwidths, discrete)
    S = kc.smoother(exclude_self=True)
    fitted = S @ data.y if center_values is None else np.asarray(center_values, dtype=float)
    eps = data.y - fitted
    r = np.abs(eps)
    h = silverman_bandwidth(r)

    def terms(zeta):
        d = S @ (gaussian_kernel((zeta - r) / h) / h)
        return (1.0 - alpha) - (r < zeta) - eps * d

    hi = 2.0 * float(r.max()) if r.max() > 0 else 1.0
    res = bisect_root(lambda t: float(terms(t).sum()), 0.0, hi, tol=tol, full_output=True)
    zeta = res.root
    dens = kde_at(zeta, r, h)
    phi = terms(zeta) / dens
    est = ZetaEstimate(zeta, ZetaMethod.DIRECT, float(np.mean(phi ** 2)) / data.n, dens, alpha,
                       {"bracket": (res.lo, res.hi), "iterations": res.iterations, "bandwidth": h,
                        "kernel_bandwidths": kc.design.bandwidths.tolist()})
    est.center = (lambda w, z: kc.values(w, z)) if center_values is None else None
    est.center_values = fitted
    return est


def naive_fit_beta(data: Dataset, spec: ModelSpec, init=None, max_iter: int = 200) -> FittedBeta:
    """Least squares of ``y`` on ``m(w, z, beta)``, ignoring measurement error."""
    p = spec.mean.n_params(data.d_z)
    if data.n <= p:
        raise InvalidInputError(f"need more rows ({data.n}) than parameters ({p})")
    res = gauss_newton(data.w, data.z, data.y, spec, init=init, max_iter=max_iter)
    return FittedBeta(res.beta, res.iterations, res.grad_norm, np.zeros(data.n, dtype=int), None,
                      1e-8 * data.n, solver="gauss_newton")


def naive_fit_zeta(data: Dataset, alpha: float, naive_beta, spec: ModelSpec, bandwidths=None,
                   discrete=None, tol: float = 1e-9) -> ZetaEstimate:
    """Naive-model half-width with the plug-in center ``m(w, z, beta)``.

    The estimating function is the naive influence function multiplied
    through by the (positive) density of ``r`` at ``zeta``:
    ``(1 - alpha - I) + e E[e I | w, z] / E[e^2 | w, z] + e m'^T M^{-1} v(zeta)``.
    """
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")
    beta = naive_beta.beta_hat if isinstance(naive_beta, FittedBeta) else np.asarray(naive_beta, float)
    kc = KernelCenter(data, bandwidths, discrete)
    S = kc.smoother(exclude_self=True)
    center = spec.mean(data.w, data.z, beta)
    eps = data.y - center
    r = np.abs(eps)
    h = silverman_bandwidth(r)
    mprime = spec.mean.gradient(data.w, data.z, beta)                 # (n, p)
    e2 = np.maximum(S @ eps ** 2, 1e-12 * np.mean(eps ** 2))
    var_e2 = np.maximum(S @ eps ** 4 - e2 ** 2, 1e-12 * np.mean(eps ** 2) ** 2)
    M = (mprime / var_e2[:, None]).T @ mprime / data.n
    cond = float(np.linalg.cond(M))
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError("naive information matrix is singular", cond)
    dr = -np.sign(eps)[:, None] * mprime
    proj = eps[:, None] * mprime                                       # e m'^T

    def terms(zeta):
        ind = (r < zeta).astype(float)
        t2 = eps * (S @ (eps * ind)) / e2
        v = (gaussian_kernel((zeta - r) / h)[:, None] / h * dr
             + (eps * ind / e2)[:, None] * mprime).mean(axis=0)
        t3 = proj @ np.linalg.solve(M, v)
        return (1.0 - alpha) - ind + t2 + t3

    hi = 2.0 * float(r.max()) if r.max() > 0 else 1.0
    res = bisect_root(lambda t: float(terms(t).sum()), 0.0, hi, tol=tol, full_output=True)
    zeta = res.root
    dens = kde_at(zeta, r, h)
    phi = terms(zeta) / dens
    est = ZetaEstimate(zeta, ZetaMethod.NAIVE, float(np.mean(phi ** 2)) / data.n, dens, alpha,
                       {"bracket": (res.lo, res.hi), "iterations": res.iterations, "bandwidth": h,
                        "score_sum": (eps @ mprime).tolist()})
    est.center = lambda w, z: spec.mean(w, z, beta)
    est.center_values = center
    return est


__all__ = ["KernelCenter", "SplitPlan", "conformal_fit", "direct_fit", "naive_fit_beta",
           "naive_fit_zeta"]
