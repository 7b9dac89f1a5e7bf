"""Semiparametric estimation of the interval half-width ``zeta``.

``zeta`` solves

    G(zeta) = sum_i [E*{a1*(X, Z) | O_i} + (1 - alpha) - E*[I{r < zeta} | Z_i]] = 0

where the middle expectation is under the working model and ``a1*`` is
the coverage correction from the group Fredholm systems. The same
pieces give the influence function and a sandwich variance.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError, SingularMatrixError
from .fredholm import (COVERAGE_NODES, FredholmDiagnostics, coverage_nodes, node_centers,
                       posterior_expectation, rhs_a1, solve, window_probability)
from .models import CenterSpec, Dataset, ModelSpec, Observation, PriorSet, residuals
from .numerics import bisect_root, gaussian_kernel, kde_at, silverman_bandwidth
from .semiparam import EfficientScoreEquation, PriorArg, ScoreEvaluation, as_prior_set


class ZetaMethod(str, enum.Enum):
    SEMIPARAM = "semiparam"
    CONFORMAL = "conformal"
    DIRECT = "direct"
    NAIVE = "naive"


@dataclass
class ZetaEstimate:
    zeta_hat: float
    method: ZetaMethod
    variance: float | None
    density_at_zeta: float
    alpha: float
    diagnostics: dict = field(default_factory=dict)
    # fitted center f(w, z) and its values on the fitting rows, when available
    center: object = field(default=None, repr=False, compare=False)
    center_values: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.method = ZetaMethod(self.method)
        if not (math.isfinite(self.zeta_hat) and self.zeta_hat >= 0):
            raise InvalidInputError(f"zeta_hat must be finite and nonnegative, got {self.zeta_hat}")
        if self.variance is not None and not self.variance >= 0:
            raise InvalidInputError(f"variance must be nonnegative, got {self.variance}")
        if not 0 < self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def se(self) -> float | None:
        return None if self.variance is None else math.sqrt(self.variance)

    @property
    def length(self) -> float:
        return 2.0 * self.zeta_hat

    def interval(self, center_values):
        c = np.asarray(center_values, dtype=float)
        return c - self.zeta_hat, c + self.zeta_hat

    def as_dict(self) -> dict:
        return {
            "zeta_hat": self.zeta_hat,
            "method": self.method.value,
            "variance": self.variance,
            "se": self.se,
            "density_at_zeta": self.density_at_zeta,
            "alpha": self.alpha,
            "diagnostics": self.diagnostics,
        }


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")


def indicator_given_xz(x, z, beta, zeta, center: CenterSpec, spec: ModelSpec,
                       n_cov: int = COVERAGE_NODES) -> float:
    """``P(|Y - center(W, z)| < zeta | X = x, Z = z)`` under the working model.

    Exact in ``y``; ``n_cov``-point trapezoid rule in ``w``.
    """
    if zeta < 0:
        raise InvalidInputError("zeta must be nonnegative")
    z = np.asarray(z, dtype=float)
    w_nodes, pw = coverage_nodes(float(x), spec.sigma_u, n_cov)
    c = np.asarray(center.values(w_nodes, np.broadcast_to(z, (n_cov, len(z))), beta), dtype=float)
    mu = float(spec.mean(float(x), z, beta))
    return float(window_probability(c, mu, pw, zeta, spec.sigma_eps))


class ZetaProblem:
    """Everything ``G`` needs at a fixed ``beta``, tabulated once.

    Center values at the quadrature nodes are the expensive part, so they
    are computed here and reused for every ``zeta`` the root finder tries.
    """

    def __init__(self, data: Dataset, beta, priors: PriorArg, center: CenterSpec, spec: ModelSpec,
                 n_w: int = 20, n_y: int = 20, diagnostics: FredholmDiagnostics | None = None,
                 evaluation: ScoreEvaluation | None = None):
        self.data = data
        self.beta = np.asarray(beta, dtype=float)
        self.priors = as_prior_set(priors, data)
        self.center = center
        self.spec = spec
        self.diagnostics = diagnostics if diagnostics is not None else FredholmDiagnostics()
        if evaluation is None:
            evaluation = EfficientScoreEquation(data, self.priors, spec, n_w, n_y,
                                                self.diagnostics).evaluate(self.beta)
        self.evaluation = evaluation
        self.systems = evaluation.systems
        self.table = evaluation.table
        self.system_centers = [node_centers(s, center, self.beta) for s in self.systems]
        support = self.table.support                                   # (n, m)
        z = data.z
        w_nodes, pw = coverage_nodes(support, spec.sigma_u)            # (n, m, n_cov)
        self.w_probs = np.asarray(pw)
        self.row_centers = center.values_at_nodes(w_nodes, z, self.beta)
        self.row_mu = spec.mean(support, z[:, None, :], self.beta)     # (n, m)
        self.row_masses = np.exp(self.priors.log_mass_rows(self.table.groups))
        self.center_values = np.asarray(center.values(data.w, data.z, self.beta), dtype=float)
        self.residuals = residuals(data, center, self.beta)

    @property
    def n(self) -> int:
        return self.data.n

    def a1_coef(self, zeta: float) -> list:
        return [solve(s, rhs_a1(s, zeta, self.center, centers=c), self.diagnostics)
                for s, c in zip(self.systems, self.system_centers)]

    def coverage_given_z(self, zeta: float) -> np.ndarray:
        """``E*[I{r < zeta} | Z_i]`` for every row."""
        q = window_probability(self.row_centers, self.row_mu, self.w_probs, zeta,
                               self.spec.sigma_eps)
        return np.einsum("nj,nj->n", self.row_masses, q)

    def components(self, zeta: float):
        """``(E*{a1*|O_i}, E*[I|Z_i], a1* per group)``."""
        a1 = self.a1_coef(zeta)
        return posterior_expectation(self.table, a1), self.coverage_given_z(zeta), a1

    def terms(self, zeta: float, alpha: float) -> np.ndarray:
        a1_post, cover, _ = self.components(zeta)
        return a1_post + (1.0 - alpha) - cover

    def G(self, zeta: float, alpha: float) -> float:
        return float(self.terms(zeta, alpha).sum())


def estimating_function(zeta, data: Dataset, beta_hat, priors: PriorArg, center: CenterSpec,
                        spec: ModelSpec, alpha: float = 0.1, n_w: int = 20, n_y: int = 20) -> float:
    """``G(zeta)``; builds a fresh :class:`ZetaProblem` (use one directly for repeated calls)."""
    _check_alpha(alpha)
    return ZetaProblem(data, beta_hat, priors, center, spec, n_w, n_y).G(zeta, alpha)


def fit_zeta(data: Dataset, beta_hat, priors: PriorArg, center: CenterSpec, alpha: float,
             spec: ModelSpec, tol: float = 1e-8, n_w: int = 20, n_y: int = 20,
             problem: ZetaProblem | None = None, with_variance: bool = False,
             bandwidth: float | None = None) -> ZetaEstimate:
    """Root of ``G`` on ``[0, 2 max_i r_i]`` by bisection."""
    _check_alpha(alpha)
    if problem is None:
        problem = ZetaProblem(data, beta_hat, priors, center, spec, n_w, n_y)
    hi = 2.0 * float(np.max(problem.residuals))
    if not hi > 0:
        hi = 10.0 * spec.sigma_eps
    res = bisect_root(lambda t: problem.G(t, alpha), 0.0, hi, tol=tol, full_output=True)
    zeta_hat = res.root
    h = silverman_bandwidth(problem.residuals) if bandwidth is None else bandwidth
    dens = kde_at(zeta_hat, problem.residuals, h)
    diagnostics = {"bracket": (res.lo, res.hi), "search_interval": (0.0, hi),
                   "iterations": res.iterations, "bandwidth": h,
                   "underflow_rows": int(problem.table.underflow.sum()),
                   "fredholm": problem.diagnostics.as_dict()}
    est = ZetaEstimate(zeta_hat, ZetaMethod.SEMIPARAM, None, dens, alpha, diagnostics)
    est.center = lambda w, z: center.values(w, z, problem.beta)
    est.center_values = problem.center_values
    if with_variance:
        vr = variance_v(data, beta_hat, zeta_hat, problem.priors, center, spec, alpha=alpha,
                        problem=problem, bandwidth=h, full_output=True)
        est.variance = vr.variance
        est.diagnostics["c_hat"] = vr.c.tolist()
        est.diagnostics["dphi_dzeta"] = vr.dphi_dzeta
    return est


def _kernel_delta(zeta, r, h):
    """Weights ``K_h(zeta - r_i)`` standing in for ``delta(zeta - r_i)``."""
    return gaussian_kernel((zeta - r) / h) / h


def c_hat(data: Dataset, beta_hat, zeta_hat, priors: PriorArg, center: CenterSpec, spec: ModelSpec,
          alpha: float = 0.1, problem: ZetaProblem | None = None,
          bandwidth: float | None = None) -> np.ndarray:
    """Coefficient of ``S*_eff`` in the influence function.

    ``[E S S^T]^{-1} ((E[delta(zeta - r) dr/dbeta] - E[I{r < zeta} S*_beta]
    - E[E*{a1|O} E*{a*|O}]) / f)`` with ``f`` the density of ``r`` at
    ``zeta`` and sample averages throughout.
    """
    if problem is None:
        problem = ZetaProblem(data, beta_hat, priors, center, spec)
    ev = problem.evaluation
    r = problem.residuals
    h = silverman_bandwidth(r) if bandwidth is None else bandwidth
    f = kde_at(zeta_hat, r, h)
    if not f > 0:
        raise InvalidInputError("density of the residuals at zeta is not positive")
    a1_post, _, _ = problem.components(zeta_hat)
    sgn = np.sign(data.y - problem.center_values)
    dr = -sgn[:, None] * np.asarray(center.beta_gradient(data.w, data.z, problem.beta))
    kd = _kernel_delta(zeta_hat, r, h)
    ind = (r < zeta_hat).astype(float)
    vec = ((kd[:, None] * dr).mean(axis=0) - (ind[:, None] * ev.s_work).mean(axis=0)
           - (a1_post[:, None] * ev.a_post).mean(axis=0)) / f
    M = ev.s_eff.T @ ev.s_eff / data.n
    cond = float(np.linalg.cond(M))
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError("second-moment matrix of the efficient score is singular", cond)
    return np.linalg.solve(M, vec)


def phi_values(problem: ZetaProblem, zeta, c, density: float, alpha: float) -> np.ndarray:
    """``phi*(O_i)`` for every row of ``problem.data``."""
    if not density > 0:
        raise InvalidInputError("density_at_zeta must be positive")
    return problem.evaluation.s_eff @ np.asarray(c, dtype=float) + problem.terms(zeta, alpha) / density


def phi_hat(o: Observation, beta_hat, zeta_hat, c, priors: PriorArg, center: CenterSpec,
            spec: ModelSpec, density_at_zeta: float, alpha: float = 0.1, n_w: int = 20,
            n_y: int = 20) -> float:
    """Influence function at one observation."""
    if not density_at_zeta > 0:
        raise InvalidInputError("density_at_zeta must be positive")
    one = Dataset(np.array([o.w]), np.atleast_2d(o.z), np.array([o.y]))
    problem = ZetaProblem(one, beta_hat, priors, center, spec, n_w, n_y)
    return float(phi_values(problem, zeta_hat, c, density_at_zeta, alpha)[0])


@dataclass
class VarianceResult:
    variance: float           # v / n
    v: float
    c: np.ndarray
    density: float
    dphi_dzeta: float
    dphi_dbeta: np.ndarray
    dS_dbeta: np.ndarray
    u: np.ndarray


def variance_v(data: Dataset, beta_hat, zeta_hat, priors: PriorArg, center: CenterSpec,
               spec: ModelSpec, alpha: float = 0.1, rel_step: float = 1e-4,
               problem: ZetaProblem | None = None, bandwidth: float | None = None,
               n_w: int = 20, n_y: int = 20, full_output: bool = False):
    """Squared standard error ``v / n`` of ``zeta_hat``.

    ``v = mean(u^2) / (d phi_bar / d zeta)^2`` with
    ``u = phi - (d phi_bar / d beta) (d S_bar / d beta)^{-1} S*_eff``. The
    coefficient ``c`` and density are held at their fitted values while
    differentiating; derivatives are central differences.
    """
    _check_alpha(alpha)
    beta_hat = np.asarray(beta_hat, dtype=float)
    priors = as_prior_set(priors, data)
    if problem is None:
        problem = ZetaProblem(data, beta_hat, priors, center, spec, n_w, n_y)
    r = problem.residuals
    h = silverman_bandwidth(r) if bandwidth is None else bandwidth
    f = kde_at(zeta_hat, r, h)
    c = c_hat(data, beta_hat, zeta_hat, priors, center, spec, alpha, problem, h)
    phi = phi_values(problem, zeta_hat, c, f, alpha)

    hz = rel_step * max(abs(zeta_hat), 1e-3)
    dphi_dzeta = (phi_values(problem, zeta_hat + hz, c, f, alpha).mean()
                  - phi_values(problem, zeta_hat - hz, c, f, alpha).mean()) / (2 * hz)
    if abs(dphi_dzeta) < 1e-8:
        raise SingularMatrixError("d phi / d zeta is numerically zero", float("inf"))

    p = len(beta_hat)
    dphi_dbeta = np.empty(p)
    dS = np.empty((p, p))
    for k in range(p):
        hk = rel_step * (1.0 + abs(beta_hat[k]))
        e = np.zeros(p)
        e[k] = hk
        plus = ZetaProblem(data, beta_hat + e, priors, center, spec, n_w, n_y)
        minus = ZetaProblem(data, beta_hat - e, priors, center, spec, n_w, n_y)
        dphi_dbeta[k] = (phi_values(plus, zeta_hat, c, f, alpha).mean()
                         - phi_values(minus, zeta_hat, c, f, alpha).mean()) / (2 * hk)
        dS[:, k] = (plus.evaluation.s_eff.mean(axis=0)
                    - minus.evaluation.s_eff.mean(axis=0)) / (2 * hk)
    s_eff = problem.evaluation.s_eff
    u = phi - s_eff @ np.linalg.solve(dS.T, dphi_dbeta)
    v = float(np.mean(u * u)) / dphi_dzeta ** 2
    out = VarianceResult(v / data.n, v, c, f, float(dphi_dzeta), dphi_dbeta, dS, u)
    return out if full_output else out.variance


__all__ = [
    "ZetaEstimate", "ZetaMethod", "ZetaProblem", "VarianceResult", "c_hat", "estimating_function",
    "fit_zeta", "indicator_given_xz", "phi_hat", "phi_values", "variance_v",
]
