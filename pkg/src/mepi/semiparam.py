"""Locally efficient estimation of the regression parameters.

The working score is the posterior-weighted complete-data score under a
discrete working prior for ``X``; subtracting ``E*{a*(X, Z) | O}`` with
``a*`` from the group Fredholm systems gives an estimating function that
stays mean zero when the prior is wrong.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from scipy.optimize import least_squares

from .exceptions import ConvergenceError, SingularMatrixError
from .fredholm import (FredholmDiagnostics, PosteriorTable, build_group_systems,
                       posterior_expectation, posterior_table, posterior_weights, rhs_score,
                       solve, uniform_z_reference)
from .models import Dataset, ModelSpec, Observation, PriorSet, WorkingPrior
from .nls import gauss_newton

PriorArg = Union[PriorSet, WorkingPrior, Callable[[Dataset], PriorSet]]


def working_score(o: Observation, beta, prior: WorkingPrior, spec: ModelSpec) -> np.ndarray:
    """``S*_beta(o) = sum_j pi_j(o) dlog f(y | x_j, z) / dbeta``."""
    pi = posterior_weights(o, beta, prior, spec)
    z = np.asarray(o.z, dtype=float)
    mj = spec.mean(prior.support, z, beta)
    grad = spec.mean.gradient(prior.support, z, beta)
    return (pi * (o.y - mj) / spec.sigma_eps ** 2) @ grad


def efficient_score(o: Observation, beta, prior: WorkingPrior, a_star, spec: ModelSpec) -> np.ndarray:
    """Working score minus the posterior mean of ``a*`` (tabulated on the support)."""
    pi = posterior_weights(o, beta, prior, spec)
    return working_score(o, beta, prior, spec) - pi @ np.asarray(a_star, dtype=float)


def working_scores(data: Dataset, beta, table: PosteriorTable, spec: ModelSpec) -> np.ndarray:
    """Rows of ``S*_beta`` for a dataset, given its posterior table."""
    z = data.z[:, None, :]
    mj = spec.mean(table.support, z, beta)
    grad = spec.mean.gradient(table.support, z, beta)
    resid = (data.y[:, None] - mj) / spec.sigma_eps ** 2
    return np.einsum("nj,njp->np", table.probs * resid, grad)


def as_prior_set(priors: PriorArg, data: Dataset) -> PriorSet:
    if isinstance(priors, PriorSet):
        return priors
    if isinstance(priors, WorkingPrior):
        return PriorSet.single(priors)
    return priors(data)


@dataclass
class ScoreEvaluation:
    beta: np.ndarray
    total: np.ndarray            # sum_i S_eff(O_i)
    s_eff: np.ndarray            # (n, p)
    s_work: np.ndarray           # (n, p)
    a_post: np.ndarray           # (n, p) E*{a*|O_i}
    a_star: list                 # per group, (m, p)
    systems: list
    table: PosteriorTable


class EfficientScoreEquation:
    """``beta -> sum_i S*_eff(O_i, beta)`` with ``a*`` re-solved at every call."""

    def __init__(self, data: Dataset, priors: PriorSet, spec: ModelSpec, n_w: int = 20,
                 n_y: int = 20, diagnostics: FredholmDiagnostics | None = None):
        self.data = data
        self.priors = priors
        self.spec = spec
        self.n_w = n_w
        self.n_y = n_y
        self.diagnostics = diagnostics if diagnostics is not None else FredholmDiagnostics()
        self.z_fallback = uniform_z_reference(data)

    def evaluate(self, beta) -> ScoreEvaluation:
        beta = np.asarray(beta, dtype=float)
        systems = build_group_systems(beta, self.priors, self.spec, self.z_fallback, self.n_w,
                                      self.n_y, self.diagnostics)
        a_star = [solve(s, rhs_score(s), self.diagnostics) for s in systems]
        table = posterior_table(self.data.w, self.data.z, self.data.y, beta, self.priors, self.spec)
        s_work = working_scores(self.data, beta, table, self.spec)
        a_post = posterior_expectation(table, a_star)
        s_eff = s_work - a_post
        return ScoreEvaluation(beta, s_eff.sum(axis=0), s_eff, s_work, a_post, a_star, systems, table)

    def __call__(self, beta) -> np.ndarray:
        return self.evaluate(beta).total

    def jacobian(self, beta, rel_step: float = 1e-5) -> np.ndarray:
        """Central differences, step ``rel_step * (1 + |beta_k|)``."""
        beta = np.asarray(beta, dtype=float)
        p = len(beta)
        J = np.empty((p, p))
        for k in range(p):
            h = rel_step * (1.0 + abs(beta[k]))
            e = np.zeros(p)
            e[k] = h
            J[:, k] = (self(beta + e) - self(beta - e)) / (2.0 * h)
        return J


@dataclass
class FittedBeta:
    beta_hat: np.ndarray
    iterations: int
    final_eq_norm: float
    group_assignments: np.ndarray
    priors: PriorSet
    tol: float
    trace: list = field(default_factory=list)
    jacobian: np.ndarray | None = None
    diagnostics: FredholmDiagnostics = field(default_factory=FredholmDiagnostics)
    solver: str = "newton"
    converged: bool = True


def _newton(eq: EfficientScoreEquation, beta, tol, max_iter):
    """Returns ``(beta, F, norm, iterations, trace, jacobian)``; raises on
    a singular Jacobian, returns the last iterate when ``max_iter`` runs out."""
    F = eq(beta)
    norm = float(np.max(np.abs(F)))
    trace = [(0, beta.tolist(), norm)]
    J = None
    for it in range(1, max_iter + 1):
        if norm < tol:
            return beta, norm, it - 1, trace, J
        J = eq.jacobian(beta)
        cond = float(np.linalg.cond(J))
        if not np.isfinite(cond) or cond > 1e12:
            raise SingularMatrixError("singular Jacobian in the efficient-score Newton step", cond)
        step = np.linalg.solve(J, F)
        t = 1.0
        for _ in range(11):
            cand = beta - t * step
            F_c = eq(cand)
            norm_c = float(np.max(np.abs(F_c)))
            if norm_c < norm:
                break
            t *= 0.5
        beta, F, norm = cand, F_c, norm_c
        trace.append((it, beta.tolist(), norm))
    return beta, norm, max_iter, trace, J


def fit_beta(data: Dataset, spec: ModelSpec, priors: PriorArg, init=None, tol: float | None = None,
             max_iter: int = 50, n_w: int = 20, n_y: int = 20,
             fallback: str | None = None) -> FittedBeta:
    """Newton iterations on ``sum_i S*_eff(O_i, beta) = 0``.

    The Jacobian is a central-difference approximation; each Newton step is
    halved (up to 10 times) until the sup-norm of the equation drops.
    ``init`` defaults to the naive least-squares fit of ``y`` on
    ``m(w, z, beta)``.

    With a coarse discrete prior and small ``sigma_eps`` the equation can be
    rough enough that Newton stalls or no exact root exists. By default that
    raises :class:`ConvergenceError`; ``fallback="least_squares"`` instead
    minimises ``||F||^2`` by a trust-region method started at ``init`` and
    returns the better of the two candidates with ``converged`` set
    accordingly.
    """
    if fallback not in (None, "least_squares"):
        raise ValueError(f"unknown fallback {fallback!r}")
    priors = as_prior_set(priors, data)
    p = spec.mean.n_params(data.d_z)
    if data.n <= p:
        raise ValueError(f"need more rows ({data.n}) than parameters ({p})")
    if init is None:
        init = gauss_newton(data.w, data.z, data.y, spec).beta
    init = np.asarray(init, dtype=float).copy()
    if not np.all(np.isfinite(init)) or len(init) != p:
        raise ValueError(f"init must be {p} finite values")
    tol = 1e-6 * data.n if tol is None else tol
    eq = EfficientScoreEquation(data, priors, spec, n_w, n_y)
    groups = priors.group_of(data.z)
    try:
        beta, norm, iterations, trace, J = _newton(eq, init, tol, max_iter)
    except SingularMatrixError:
        if fallback is None:
            raise
        beta, norm, iterations, trace, J = init, np.inf, 0, [], None
    if norm < tol:
        return FittedBeta(beta, iterations, norm, groups, priors, tol, trace, J, eq.diagnostics)
    if fallback is None:
        raise ConvergenceError(
            f"efficient-score equation not solved in {max_iter} iterations "
            f"(|F|={norm:.3e}, tol={tol:.3e})", trace)
    scale = 0.1 * (1.0 + np.abs(init))
    res = least_squares(eq, init, x_scale=scale, xtol=1e-10, ftol=1e-12, gtol=1e-12, max_nfev=400)
    ls_norm = float(np.max(np.abs(res.fun)))
    trace.append(("least_squares", res.x.tolist(), ls_norm))
    if ls_norm <= norm:
        beta, norm, solver = res.x, ls_norm, "least_squares"
    else:
        solver = "newton"
    return FittedBeta(np.asarray(beta), iterations, norm, groups, priors, tol, trace, J,
                      eq.diagnostics, solver=solver, converged=bool(norm < tol))
