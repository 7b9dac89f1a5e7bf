"""The six interval methods on one dataset, shared by the simulations and the CLI.

m1*: semiparametric ``beta`` with the working posterior-mean center,
m2*: kernel-regression center, m3*: naive least-squares ``beta`` with the
plug-in center. The ``s`` variants estimate ``zeta`` semiparametrically
(or by the direct / naive equations), the ``c`` variants by split conformal.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .alternatives import KernelCenter, SplitPlan, conformal_fit, direct_fit, naive_fit_beta, naive_fit_zeta
from .exceptions import InvalidInputError
from .models import Dataset, ModelSpec, PosteriorMeanCenter, PriorSet, WorkingPrior
from .semiparam import FittedBeta, fit_beta
from .zeta import ZetaEstimate, fit_zeta

METHODS = ("m1s", "m1c", "m2s", "m2c", "m3s", "m3c")

PriorBuilder = Callable[[Dataset], PriorSet]


@dataclass
class MethodOutcome:
    method: str
    estimate: ZetaEstimate | None = None
    center: np.ndarray | None = None         # centers on the fitting rows
    beta: np.ndarray | None = None
    error: str | None = None
    center_fn: object = field(default=None, repr=False)
    fitted_beta: FittedBeta | None = field(default=None, repr=False)
    center_state: dict | None = None         # serialisable recipe, see center_from_state
    exception: BaseException | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def lower(self):
        return self.center - self.estimate.zeta_hat

    @property
    def upper(self):
        return self.center + self.estimate.zeta_hat


@dataclass
class PipelineConfig:
    """Settings shared by the six methods.

    ``beta_init`` is the Newton start for the semiparametric fit (``None``
    uses the naive least-squares fit).
    """

    spec: ModelSpec
    priors: PriorBuilder
    alpha: float = 0.1
    beta_init: np.ndarray | None = None
    fallback: str | None = "least_squares"
    newton_max_iter: int = 20
    split_fraction: float = 0.5
    zeta_tol: float = 1e-8
    with_variance: bool = False

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")


class FittedCenter:
    """Callable ``f(w, z)`` carrying a serialisable description of itself."""

    def __init__(self, fn, state: dict):
        self.fn = fn
        self.state = state

    def __call__(self, w, z):
        return self.fn(w, z)


def prior_set_to_dict(priors: PriorSet) -> dict:
    return {"support": [p.support.tolist() for p in priors.priors],
            "masses": [p.masses.tolist() for p in priors.priors],
            "centroids": None if priors.centroids is None else priors.centroids.tolist()}


def prior_set_from_dict(d: dict) -> PriorSet:
    priors = [WorkingPrior(np.asarray(s, dtype=float), np.asarray(m, dtype=float), g)
              for g, (s, m) in enumerate(zip(d["support"], d["masses"]))]
    if len(priors) == 1:
        return PriorSet.single(WorkingPrior(priors[0].support, priors[0].masses))
    return PriorSet(tuple(priors), np.asarray(d["centroids"], dtype=float))


def _posterior_mean_center(spec, priors, beta):
    center = PosteriorMeanCenter(spec, priors)
    state = {"kind": "posterior_mean", "beta": np.asarray(beta).tolist(),
             "priors": prior_set_to_dict(priors)}
    return FittedCenter(lambda w, z: center.values(w, z, beta), state)


def _kernel_center(data: Dataset, rows=None):
    part = data if rows is None else data.subset(rows)
    kc = KernelCenter(part)
    state = {"kind": "kernel", "rows": None if rows is None else np.asarray(rows).tolist(),
             "bandwidths": kc.design.bandwidths.tolist(), "discrete": kc.design.discrete.tolist()}
    return FittedCenter(lambda w, z: kc.values(w, z), state)


def _plugin_center(spec, beta):
    return FittedCenter(lambda w, z: spec.mean(w, z, beta),
                        {"kind": "plugin", "beta": np.asarray(beta).tolist()})


def center_from_state(state: dict, spec: ModelSpec, train: Dataset | None = None) -> FittedCenter:
    """Rebuild a fitted center; kernel centers need the training data."""
    kind = state.get("kind")
    if kind == "posterior_mean":
        return _posterior_mean_center(spec, prior_set_from_dict(state["priors"]),
                                      np.asarray(state["beta"], dtype=float))
    if kind == "plugin":
        return _plugin_center(spec, np.asarray(state["beta"], dtype=float))
    if kind == "kernel":
        if train is None:
            raise InvalidInputError("kernel centers need the training data")
        part = train if state["rows"] is None else train.subset(state["rows"])
        kc = KernelCenter(part, state["bandwidths"], state["discrete"])
        return FittedCenter(lambda w, z: kc.values(w, z), dict(state))
    raise InvalidInputError(f"unknown center kind {kind!r}")


def semiparam_beta(data: Dataset, cfg: PipelineConfig, priors: PriorSet) -> FittedBeta:
    return fit_beta(data, cfg.spec, priors, init=cfg.beta_init, max_iter=cfg.newton_max_iter,
                    fallback=cfg.fallback)


def m1_center_fitter(cfg: PipelineConfig):
    """Fits ``beta`` and the posterior-mean center on a data part."""
    def fitter(part: Dataset):
        priors = cfg.priors(part)
        beta = semiparam_beta(part, cfg, priors).beta_hat
        return _posterior_mean_center(cfg.spec, priors, beta)
    return fitter


def m3_center_fitter(cfg: PipelineConfig):
    def fitter(part: Dataset):
        return _plugin_center(cfg.spec, naive_fit_beta(part, cfg.spec).beta_hat)
    return fitter


def _conformal(data, cfg, plan, fitter, method):
    est = conformal_fit(data, cfg.alpha, plan, fitter, cfg.spec)
    state = dict(est.center.state)
    if state["kind"] == "kernel":
        state["rows"] = plan.estimation_indices.tolist()
    return MethodOutcome(method, est, np.asarray(est.center(data.w, data.z), dtype=float),
                         center_fn=est.center, center_state=state)


def fit_methods(data: Dataset, cfg: PipelineConfig, methods=METHODS, split_seed: int = 0) -> dict:
    """Fit the selected methods; failures are isolated per method.

    Each pair shares one fit: the semiparametric ``beta`` (m1), the kernel
    smoother (m2) or the naive ``beta`` (m3). Conformal variants refit on
    the estimation part of one shared random split.
    """
    methods = tuple(methods)
    bad = set(methods) - set(METHODS)
    if bad:
        raise InvalidInputError(f"unknown methods {sorted(bad)}")
    spec = cfg.spec
    out = {}
    plan = SplitPlan.random(data.n, split_seed, cfg.split_fraction)

    def attempt(name, fn):
        if name not in methods:
            return
        try:
            out[name] = fn()
        except Exception as exc:  # isolate per-method failures
            out[name] = MethodOutcome(name, error=f"{type(exc).__name__}: {exc}", exception=exc)

    def m1s():
        priors = cfg.priors(data)
        fb = semiparam_beta(data, cfg, priors)
        center = PosteriorMeanCenter(spec, priors)
        est = fit_zeta(data, fb.beta_hat, priors, center, cfg.alpha, spec, tol=cfg.zeta_tol,
                       with_variance=cfg.with_variance)
        est.diagnostics["beta_converged"] = fb.converged
        est.diagnostics["beta_solver"] = fb.solver
        est.diagnostics["beta_eq_norm"] = fb.final_eq_norm
        return MethodOutcome("m1s", est, est.center_values, fb.beta_hat, center_fn=est.center,
                             fitted_beta=fb,
                             center_state=_posterior_mean_center(spec, priors, fb.beta_hat).state)

    def m2s():
        est = direct_fit(data, cfg.alpha, spec=spec)
        # fitted values are leave-one-out; new points use the full smoother
        return MethodOutcome("m2s", est, est.center_values, center_fn=est.center,
                             center_state=_kernel_center(data).state)

    def m3s():
        nb = naive_fit_beta(data, spec)
        est = naive_fit_zeta(data, cfg.alpha, nb, spec)
        return MethodOutcome("m3s", est, est.center_values, nb.beta_hat, center_fn=est.center,
                             fitted_beta=nb, center_state=_plugin_center(spec, nb.beta_hat).state)

    attempt("m1s", m1s)
    attempt("m1c", lambda: _conformal(data, cfg, plan, m1_center_fitter(cfg), "m1c"))
    attempt("m2s", m2s)
    attempt("m2c", lambda: _conformal(data, cfg, plan, _kernel_center, "m2c"))
    attempt("m3s", m3s)
    attempt("m3c", lambda: _conformal(data, cfg, plan, m3_center_fitter(cfg), "m3c"))
    return {m: out[m] for m in METHODS if m in out}


__all__ = ["METHODS", "FittedCenter", "MethodOutcome", "PipelineConfig", "PriorBuilder",
           "center_from_state", "fit_methods", "m1_center_fitter", "m3_center_fitter",
           "prior_set_from_dict", "prior_set_to_dict", "semiparam_beta"]
