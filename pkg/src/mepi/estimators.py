"""scikit-learn style front end.

``X`` holds the error-prone covariate ``w`` in its first column and the
error-free covariates ``z1..zk`` in the rest; an intercept is added to
``z`` internally, so ``beta`` has ``k + 3`` entries.
"""
from __future__ import annotations

import warnings

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .center import HDWCenter, iterate_center
from .exceptions import InvalidInputError, MEPIError
from .models import Dataset, MeanFamily, MeanModel, ModelSpec, PosteriorMeanCenter
from .pipeline import METHODS, PipelineConfig, fit_methods
from .simulation import PriorFloorWarning, prior_builder


class MethodFailed(MEPIError):
    """The selected interval method raised during ``fit``."""


def _split_X(X) -> tuple:
    return X[:, 0], np.column_stack([np.ones(len(X)), X[:, 1:]])


class PredictionIntervalRegressor(RegressorMixin, BaseEstimator):
    """Prediction intervals ``center(w, z) +- zeta`` for ``Y`` given ``(W, Z)``.

    ``method`` is one of ``m1s`` (semiparametric, the default), ``m1c``,
    ``m2s``, ``m2c``, ``m3s``, ``m3c``. ``predict`` returns the centers;
    ``predict_interval`` returns the bounds.

    Parameters
    ----------
    mean_family : {"poly2", "sin_poly2", "exp_neg_sq"}
    sigma_eps, sigma_u : known error scales.
    prior : {"moment_uniform", "beta_grid", "uniform"} working law for ``X``.
    prior_bounds : ``(lo, hi)`` for the fixed-grid priors.
    beta_init : Newton start for the semiparametric ``beta`` (default: naive fit).
    shortest : refine the m1s center toward the shortest interval.
    """

    def __init__(self, method="m1s", mean_family="poly2", sigma_eps=0.1, sigma_u=0.3, alpha=0.1,
                 prior="moment_uniform", m_grid=30, n_groups=2, prior_bounds=None, beta_init=None,
                 fallback="least_squares", max_iter=20, split_fraction=0.5, random_state=0,
                 with_variance=False, shortest=False):
        self.method = method
        self.mean_family = mean_family
        self.sigma_eps = sigma_eps
        self.sigma_u = sigma_u
        self.alpha = alpha
        self.prior = prior
        self.m_grid = m_grid
        self.n_groups = n_groups
        self.prior_bounds = prior_bounds
        self.beta_init = beta_init
        self.fallback = fallback
        self.max_iter = max_iter
        self.split_fraction = split_fraction
        self.random_state = random_state
        self.with_variance = with_variance
        self.shortest = shortest

    def _spec(self) -> ModelSpec:
        return ModelSpec(MeanModel(MeanFamily(self.mean_family)), float(self.sigma_eps),
                         float(self.sigma_u))

    def _validate_params(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0 < self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.shortest and self.method != "m1s":
            raise InvalidInputError("shortest=True needs method='m1s'")

    def fit(self, X, y):
        self._validate_params()
        X, y = check_X_y(X, y, dtype=float, ensure_min_features=1, ensure_min_samples=20)
        w, z = _split_X(X)
        data = Dataset(w, z, y)
        spec = self._spec()
        build = prior_builder(self.prior, self.m_grid, self.n_groups, spec.sigma_u, self.prior_bounds)
        init = None if self.beta_init is None else np.asarray(self.beta_init, dtype=float)
        cfg = PipelineConfig(spec, build, self.alpha, init, self.fallback, self.max_iter,
                             self.split_fraction, with_variance=self.with_variance)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", PriorFloorWarning)
            outcome = fit_methods(data, cfg, [self.method], self.random_state)[self.method]
        if not outcome.ok:
            raise MethodFailed(f"{self.method} failed: {outcome.error}") from outcome.exception
        self.prior_floor_used_ = any(issubclass(c.category, PriorFloorWarning) for c in caught)
        self.spec_ = spec
        self.estimate_ = outcome.estimate
        self.beta_ = outcome.beta
        self.fitted_beta_ = outcome.fitted_beta
        self.priors_ = build(data) if self.method == "m1s" else None
        self.center_fn_ = outcome.center_fn
        if self.shortest:
            center, est, trace = iterate_center(data, self.beta_, self.priors_, self.alpha, spec)
            self.estimate_ = est
            self.center_trace_ = trace
            self.center_fn_ = lambda w_, z_: center.values(w_, z_, self.beta_)
        self.zeta_ = float(self.estimate_.zeta_hat)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "zeta_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(f"X has {X.shape[1]} columns, fit used {self.n_features_in_}")
        return _split_X(X)

    def predict(self, X):
        w, z = self._check_X(X)
        return np.asarray(self.center_fn_(w, z), dtype=float)

    def predict_interval(self, X, hdw: bool = False):
        """``(lower, upper)``; ``hdw`` uses highest-density-window centers (m1 only)."""
        if hdw:
            w, z = self._check_X(X)
            c = self.hdw_centers(w, z)
        else:
            c = self.predict(X)
        return c - self.zeta_, c + self.zeta_

    def hdw_centers(self, w, z):
        if self.priors_ is None or self.beta_ is None:
            raise InvalidInputError("highest-density centers need an m1 fit")
        return HDWCenter(self.spec_, self.priors_, self.zeta_).values(w, z, self.beta_)

    def posterior_mean_centers(self, w, z):
        if self.priors_ is None:
            raise InvalidInputError("posterior-mean centers need an m1 fit")
        return PosteriorMeanCenter(self.spec_, self.priors_).values(w, z, self.beta_)

    def coverage(self, X, y) -> float:
        lo, hi = self.predict_interval(X)
        y = np.asarray(y, dtype=float)
        return float(np.mean((y >= lo) & (y <= hi)))


__all__ = ["MethodFailed", "PredictionIntervalRegressor"]
