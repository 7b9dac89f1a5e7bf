"""Prediction intervals for regression with an error-prone covariate.

Semiparametric (locally efficient) estimation of the interval half-width
under a possibly misspecified working law for the latent covariate, with
split-conformal, direct-kernel and naive comparators.
"""
from .alternatives import KernelCenter, SplitPlan, conformal_fit, direct_fit, naive_fit_beta, naive_fit_zeta
from .center import CenterIterationTrace, HDWCenter, cond_density_working, iterate_center, optimal_center
from .estimators import PredictionIntervalRegressor
from .exceptions import (BracketError, ConvergenceError, IllConditionedError, InvalidInputError, MEPIError,
                         NonFiniteCenterError, QuadratureError, SingularMatrixError)
from .fredholm import FredholmSystem, build_system, solve
from .models import (CenterKind, Dataset, EpsFamily, MeanFamily, MeanModel, ModelSpec, Observation,
                     PluginCenter, PosteriorMeanCenter, PriorSet, UFamily, WorkingPrior)
from .pipeline import METHODS, PipelineConfig, fit_methods
from .semiparam import EfficientScoreEquation, FittedBeta, efficient_score, fit_beta, working_score
from .simulation import SimResult, SimScenario, build_prior, evaluate, generate, replicate, run_six_methods
from .zeta import ZetaEstimate, ZetaMethod, estimating_function, fit_zeta, phi_hat, variance_v

__version__ = "0.1.0"
