"""Discretised first-kind integral equations for the correction functions.

For one z-group with representative ``z_ref`` and working prior
``{(x_j, p_j)}``, the operator ``a -> E[E*{a(X)|O} | X = x_k]`` becomes the
row-stochastic matrix ``A[k, j] = E[pi_j(O) | X = x_k, Z = z_ref]`` where
``pi_j(o)`` are the working posterior weights. Both correction functions
(for the score and for the coverage indicator) solve ``A a = rhs``.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.special import ndtr

from .exceptions import IllConditionedError, QuadratureError
from .models import (CenterSpec, Dataset, ModelSpec, Observation, PriorSet,
                     WorkingPrior, log_softmax_rows)
from .numerics import normal_trapezoid_rule, standard_normal_rule

# nodes of the w-rule used for coverage indicators
COVERAGE_NODES = 64
# right-hand sides below this sup norm are zero up to rounding; residuals
# against them are reported in absolute terms
RHS_FLOOR = 1e-9


@dataclass
class FredholmDiagnostics:
    """Running worst-case checks over every system built and solved."""

    n_systems: int = 0
    n_solves: int = 0
    max_row_sum_error: float = 0.0
    max_relative_residual: float = 0.0
    min_entry: float = 0.0
    underflow_rows: int = 0

    def record_system(self, A: np.ndarray) -> None:
        self.n_systems += 1
        self.max_row_sum_error = max(self.max_row_sum_error, float(np.max(np.abs(A.sum(axis=1) - 1.0))))
        self.min_entry = min(self.min_entry, float(A.min()))

    def record_solve(self, residual: float, rhs_norm: float) -> None:
        self.n_solves += 1
        self.max_relative_residual = max(self.max_relative_residual,
                                         residual / max(rhs_norm, RHS_FLOOR))

    def merge(self, other: "FredholmDiagnostics") -> None:
        self.n_systems += other.n_systems
        self.n_solves += other.n_solves
        self.max_row_sum_error = max(self.max_row_sum_error, other.max_row_sum_error)
        self.max_relative_residual = max(self.max_relative_residual, other.max_relative_residual)
        self.min_entry = min(self.min_entry, other.min_entry)
        self.underflow_rows += other.underflow_rows

    def as_dict(self) -> dict:
        return {
            "n_systems": self.n_systems,
            "n_solves": self.n_solves,
            "max_row_sum_error": self.max_row_sum_error,
            "max_relative_residual": self.max_relative_residual,
            "min_entry": self.min_entry,
            "underflow_rows": self.underflow_rows,
        }


_AUDITS: list = []


@contextmanager
def audit():
    """Collect diagnostics for every system built or solved inside the block.

    Unlike the per-call ``diagnostics`` arguments this also reaches systems
    built deep inside estimators (for example conformal refits).
    """
    diag = FredholmDiagnostics()
    _AUDITS.append(diag)
    try:
        yield diag
    finally:
        # dataclass equality would match any audit with the same counts
        del _AUDITS[next(i for i, d in enumerate(_AUDITS) if d is diag)]


def _log_joint(w, y, x, z, beta, log_mass, spec: ModelSpec):
    return log_mass + spec.log_f_y(y, x, z, beta) + spec.log_f_w(w, x)


def posterior_weights(o: Observation, beta, prior: WorkingPrior, spec: ModelSpec,
                      return_flag: bool = False):
    """Working posterior of ``X`` on the prior support given one observation."""
    with np.errstate(divide="ignore"):
        logm = np.log(prior.masses)
    z = np.asarray(o.z, dtype=float)
    logw = _log_joint(o.w, o.y, prior.support, z, beta, logm, spec)
    probs, underflow = log_softmax_rows(logw[None, :])
    if return_flag:
        return probs[0], bool(underflow[0])
    return probs[0]


@dataclass(frozen=True, eq=False)
class PosteriorTable:
    """Working posterior weights for every row of a dataset."""

    probs: np.ndarray       # (n, m)
    support: np.ndarray     # (n, m) support points of each row's group
    groups: np.ndarray      # (n,)
    underflow: np.ndarray   # (n,) bool


def posterior_table(w, z, y, beta, priors: PriorSet, spec: ModelSpec) -> PosteriorTable:
    w = np.asarray(w, dtype=float)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    y = np.asarray(y, dtype=float)
    groups = priors.group_of(z)
    support = priors.support_rows(groups)
    logw = _log_joint(w[:, None], y[:, None], support, z[:, None, :], beta,
                      priors.log_mass_rows(groups), spec)
    probs, underflow = log_softmax_rows(logw)
    return PosteriorTable(probs, support, groups, underflow)


def posterior_table_for(data: Dataset, beta, priors: PriorSet, spec: ModelSpec) -> PosteriorTable:
    return posterior_table(data.w, data.z, data.y, beta, priors, spec)


@dataclass(eq=False)
class FredholmSystem:
    """``A`` for one z-group plus the quadrature it was built from.

    The unnormalised posterior at node ``(k, a, b)`` factorises as
    ``ew[k, a, j] * ey[k, b, j] * p_j``; ``norm[k, a, b]`` is its sum over
    ``j``. Keeping the factors avoids the ``(m, n_w, n_y, m)`` array.
    """

    A: np.ndarray
    z_ref: np.ndarray
    prior: WorkingPrior
    beta: np.ndarray
    spec: ModelSpec
    w_nodes: np.ndarray      # (m, n_w): W-nodes around each support point
    y_nodes: np.ndarray      # (m, n_y)
    w_probs: np.ndarray      # (n_w,)
    y_probs: np.ndarray      # (n_y,)
    ew: np.ndarray           # (m, n_w, m)
    ey: np.ndarray           # (m, n_y, m)
    norm: np.ndarray         # (m, n_w, n_y)
    mu: np.ndarray           # (m,) m(x_j, z_ref, beta)
    _lu: tuple | None = field(default=None, repr=False)
    _ridge: float = field(default=0.0, repr=False)

    @property
    def m_grid(self) -> int:
        return len(self.prior.support)

    @property
    def post(self) -> np.ndarray:
        """Posterior weights at every node, shape ``(m, n_w, n_y, m)``."""
        num = self.ew[:, :, None, :] * self.ey[:, None, :, :] * self.prior.masses
        return num / self.norm[..., None]

    def factor(self):
        if self._lu is None:
            m = self.m_grid
            self._ridge = 1e-8 * float(np.trace(self.A)) / m
            self._lu = lu_factor(self.A + self._ridge * np.eye(m))
        return self._lu


def build_system(z_ref, beta, prior: WorkingPrior, spec: ModelSpec, n_w: int = 20,
                 n_y: int = 20, diagnostics: FredholmDiagnostics | None = None) -> FredholmSystem:
    """Quadrature of ``A[k, j] = E[pi_j(W, Y) | X = x_k, Z = z_ref]``."""
    z_ref = np.asarray(z_ref, dtype=float)
    beta = np.asarray(beta, dtype=float)
    x = prior.support
    p = prior.masses
    sw, pw = standard_normal_rule(n_w)
    sy, py = standard_normal_rule(n_y)
    mu = spec.mean(x, z_ref, beta)
    w_nodes = x[:, None] + spec.sigma_u * sw[None, :]
    y_nodes = mu[:, None] + spec.sigma_eps * sy[None, :]
    # constant terms cancel in the normalisation
    ly = -0.5 * ((y_nodes[:, :, None] - mu[None, None, :]) / spec.sigma_eps) ** 2
    lw = -0.5 * ((w_nodes[:, :, None] - x[None, None, :]) / spec.sigma_u) ** 2
    ly_max = ly.max(axis=-1, keepdims=True)
    lw_max = lw.max(axis=-1, keepdims=True)
    ey = np.exp(ly - ly_max)
    ew = np.exp(lw - lw_max)
    norm = (ew * p) @ ey.transpose(0, 2, 1)
    if not np.all(norm > 0):
        raise QuadratureError("posterior weights vanish at some quadrature node")
    t = (py / norm) @ ey
    A = (pw @ (ew * t)) * p
    row_err = np.abs(A.sum(axis=1) - 1.0)
    if np.any(row_err > 1e-3):
        k = int(np.argmax(row_err))
        raise QuadratureError(f"quadrature normalisation off by {row_err[k]:.2e} at x={x[k]!r}")
    for d in _AUDITS:
        d.record_system(A)
    if diagnostics is not None:
        diagnostics.record_system(A)
    return FredholmSystem(A=A, z_ref=z_ref, prior=prior, beta=beta, spec=spec, w_nodes=w_nodes,
                          y_nodes=y_nodes, w_probs=np.array(pw), y_probs=np.array(py),
                          ew=ew, ey=ey, norm=norm, mu=mu)


def rhs_score(system: FredholmSystem, spec: ModelSpec | None = None) -> np.ndarray:
    """``b[k] = E{S*_beta(O) | X = x_k, Z = z_ref}``, one column per parameter."""
    spec = spec or system.spec
    x = system.prior.support
    mprime = spec.mean.gradient(x, system.z_ref, system.beta)          # (m, p)
    resid = (system.y_nodes[:, :, None] - system.mu[None, None, :]) / spec.sigma_eps ** 2
    t = (system.y_probs / system.norm) @ (system.ey * resid)
    weighted = (system.w_probs @ (system.ew * t)) * system.prior.masses
    return weighted @ mprime


def window_probability(centers, mu, w_probs, zeta: float, sigma_eps: float):
    """``P(|Y - c(W)| < zeta)`` with ``Y ~ N(mu, sigma_eps^2)`` integrated
    exactly in ``y`` and by the supplied rule in ``w``.

    ``centers`` has the ``w``-node axis last; ``mu`` broadcasts against the
    leading axes.
    """
    if zeta <= 0:
        return np.zeros(np.shape(centers)[:-1])
    d = (np.asarray(centers) - np.asarray(mu)[..., None]) / sigma_eps
    s = zeta / sigma_eps
    return (ndtr(d + s) - ndtr(d - s)) @ w_probs


def coverage_nodes(support, sigma_u: float, n_cov: int = COVERAGE_NODES):
    """W-nodes ``(..., n_cov)`` around each support point and their weights."""
    s, p = normal_trapezoid_rule(n_cov)
    return np.asarray(support, dtype=float)[..., None] + sigma_u * s, p


def node_centers(system: FredholmSystem, center: CenterSpec, beta=None,
                 n_cov: int = COVERAGE_NODES) -> np.ndarray:
    """Center values at the coverage W-nodes of every support point, ``(m, n_cov)``."""
    beta = system.beta if beta is None else beta
    nodes, _ = coverage_nodes(system.prior.support, system.spec.sigma_u, n_cov)
    zz = np.broadcast_to(system.z_ref, nodes.shape + (len(system.z_ref),))
    return np.asarray(center.values(nodes, zz, beta), dtype=float)


def coverage_at_support(system: FredholmSystem, zeta: float, center: CenterSpec,
                        centers=None) -> np.ndarray:
    """``Q_k = E[I{r(O) < zeta} | X = x_k, Z = z_ref]`` for every support point.

    Exact in ``y``; the ``w`` integral uses the trapezoid coverage rule, so
    ``centers`` (if given) must come from :func:`node_centers`.
    """
    if centers is None:
        centers = node_centers(system, center)
    _, p = normal_trapezoid_rule(centers.shape[-1])
    return window_probability(centers, system.mu, p, zeta, system.spec.sigma_eps)


def rhs_a1(system: FredholmSystem, zeta: float, center: CenterSpec, spec: ModelSpec | None = None,
           centers=None) -> np.ndarray:
    """``E*[I{r < zeta} | z_ref] - E[I{r < zeta} | X = x_k, z_ref]`` per support point."""
    q = coverage_at_support(system, zeta, center, centers)
    return float(system.prior.masses @ q) - q


@dataclass(frozen=True)
class FredholmSolution:
    coef: np.ndarray
    residual: float
    rhs_norm: float


def solve(system: FredholmSystem, rhs, diagnostics: FredholmDiagnostics | None = None,
          full_output: bool = False, atol: float = 1e-12):
    """Ridge-stabilised solve of ``A a = rhs`` (``lambda = 1e-8 tr(A) / m``).

    Raises :class:`IllConditionedError` when ``||A a - rhs||_inf`` exceeds
    ``1e-3 ||rhs||_inf`` (plus ``atol``, which only matters for right-hand
    sides that are zero up to rounding).
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != system.m_grid:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, system has {system.m_grid}")
    coef = lu_solve(system.factor(), rhs)
    residual = float(np.max(np.abs(system.A @ coef - rhs))) if rhs.size else 0.0
    rhs_norm = float(np.max(np.abs(rhs))) if rhs.size else 0.0
    for d in _AUDITS:
        d.record_solve(residual, rhs_norm)
    if residual > 1e-3 * rhs_norm + atol:
        cond = float(np.linalg.cond(system.A))
        raise IllConditionedError(
            f"Fredholm residual {residual:.3e} exceeds 1e-3 * |rhs| = {1e-3 * rhs_norm:.3e}", cond)
    if diagnostics is not None:
        diagnostics.record_solve(residual, rhs_norm)
    if full_output:
        return FredholmSolution(coef, residual, rhs_norm)
    return coef


def build_group_systems(beta, priors: PriorSet, spec: ModelSpec, z_fallback=None, n_w: int = 20,
                        n_y: int = 20, diagnostics: FredholmDiagnostics | None = None) -> list:
    """One system per z-group, each at the group's representative ``z``."""
    return [build_system(priors.z_ref(g, z_fallback), beta, priors.priors[g], spec, n_w, n_y,
                         diagnostics)
            for g in range(priors.n_groups)]


def posterior_expectation(table: PosteriorTable, coef_by_group) -> np.ndarray:
    """``E*{a(X, Z) | O_i}`` for every row, ``a`` tabulated per group.

    ``coef_by_group[g]`` has shape ``(m,)`` or ``(m, p)``.
    """
    coef = np.stack([np.asarray(c, dtype=float) for c in coef_by_group])   # (G, m[, p])
    rows = coef[table.groups]
    if rows.ndim == 2:
        return np.einsum("nj,nj->n", table.probs, rows)
    return np.einsum("nj,njp->np", table.probs, rows)


def uniform_z_reference(data: Dataset) -> np.ndarray:
    """Column means of ``z``: the reference point when no grouping is used."""
    return np.asarray(data.z, dtype=float).mean(axis=0)


__all__ = [
    "FredholmDiagnostics", "FredholmSystem", "audit", "FredholmSolution", "PosteriorTable",
    "COVERAGE_NODES", "build_system", "build_group_systems", "coverage_at_support",
    "coverage_nodes", "node_centers",
    "posterior_expectation", "posterior_table", "posterior_table_for", "posterior_weights",
    "rhs_a1", "rhs_score", "solve", "uniform_z_reference", "window_probability",
]
