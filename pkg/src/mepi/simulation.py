"""Simulation scenarios, the six-method pipeline and the replication engine."""
from __future__ import annotations

import csv
import enum
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .exceptions import InvalidInputError, MEPIError
from .models import (Dataset, EpsFamily, MeanFamily, MeanModel, ModelSpec, PriorSet, UFamily,
                     WorkingPrior)
from .fredholm import audit
from .numerics import kmeans2
from .pipeline import METHODS, MethodOutcome, PipelineConfig, fit_methods

MODEL_FAMILIES = {1: MeanFamily.POLY2, 2: MeanFamily.SIN_POLY2, 3: MeanFamily.EXP_NEG_SQ}
SQRT3 = math.sqrt(3.0)


class XLaw(str, enum.Enum):
    BETA_SCALED = "beta_scaled"      # 2 sqrt(3) Beta(2, 2) - sqrt(3)
    NORMAL = "normal"                # N(-1, 1)


class PriorMode(str, enum.Enum):
    TRUE_BETA_GRID = "true_beta_grid"
    MOMENT_UNIFORM = "moment_uniform"


class PriorFloorWarning(UserWarning):
    """The moment estimate of var(X) hit its floor."""


class ReplicationAbort(MEPIError):
    """More than 5% of the replications failed."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class SimScenario:
    """One simulation setting; defaults give Simulation 1, model 1, n = 500.

    ``beta_init`` selects where the efficient-score Newton iteration starts
    (``"truth"`` or ``"naive"``); ``fallback`` is passed to ``fit_beta``.
    ``test_size > 0`` adds an out-of-sample coverage column.
    """

    x_law: XLaw = XLaw.BETA_SCALED
    model: int = 1
    n: int = 500
    beta_true: tuple = (4.0, 1.0, 1.0, 1.0, 0.5)
    sigma_u: float = 0.3
    sigma_eps: float = 0.1
    eps_family: EpsFamily = EpsFamily.NORMAL
    u_family: UFamily = UFamily.NORMAL
    prior_mode: PriorMode = PriorMode.TRUE_BETA_GRID
    alpha: float = 0.1
    replications: int = 100
    seed: int = 0
    m_grid: int = 30
    n_groups: int = 2
    methods: tuple = METHODS
    beta_init: str = "truth"
    fallback: str | None = "least_squares"
    newton_max_iter: int = 20
    split_fraction: float = 0.5
    test_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "x_law", XLaw(self.x_law))
        object.__setattr__(self, "eps_family", EpsFamily(self.eps_family))
        object.__setattr__(self, "u_family", UFamily(self.u_family))
        object.__setattr__(self, "prior_mode", PriorMode(self.prior_mode))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        object.__setattr__(self, "methods", tuple(self.methods))
        if self.model not in MODEL_FAMILIES:
            raise InvalidInputError(f"model must be 1, 2 or 3, got {self.model}")
        if self.n < 20:
            raise InvalidInputError(f"n must be at least 20, got {self.n}")
        if self.replications < 1:
            raise InvalidInputError(f"replications must be >= 1, got {self.replications}")
        if not 0 < self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.sigma_u <= 0 or self.sigma_eps <= 0:
            raise InvalidInputError("sigma_u and sigma_eps must be positive")
        if self.m_grid < 1:
            raise InvalidInputError("m_grid must be positive")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise InvalidInputError(f"unknown methods {sorted(bad)}")
        if self.beta_init not in ("truth", "naive"):
            raise InvalidInputError(f"beta_init must be 'truth' or 'naive', got {self.beta_init!r}")
        if len(self.beta_true) != 5:
            raise InvalidInputError("beta_true needs 5 entries")

    @classmethod
    def simulation(cls, sim, **overrides) -> "SimScenario":
        """Named settings: ``1``, ``2`` and the robustness variants ``A1``-``A3``.

        Simulation 2 and the A-variants draw ``X ~ N(-1, 1)`` and use the
        moment-matched uniform prior; A1 has t(3) errors, A2 uniform
        measurement errors, A3 both.
        """
        sim = str(sim).upper()
        base = {"1": {}, "2": {}, "A1": {"eps_family": EpsFamily.SCALED_T3}, "A2": {"u_family": UFamily.SCALED_UNIFORM},
                "A3": {"eps_family": EpsFamily.SCALED_T3, "u_family": UFamily.SCALED_UNIFORM}}
        if sim not in base:
            raise InvalidInputError(f"unknown simulation {sim!r}")
        kw = dict(base[sim])
        if sim != "1":
            kw.update(x_law=XLaw.NORMAL, prior_mode=PriorMode.MOMENT_UNIFORM)
        kw.update(overrides)
        return cls(**kw)

    @property
    def spec(self) -> ModelSpec:
        """Fitting spec: normal errors with the known scales."""
        return ModelSpec(MeanModel(MODEL_FAMILIES[self.model]), self.sigma_eps, self.sigma_u)

    def as_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, enum.Enum):
                d[k] = v.value
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d


def _stream(scenario: SimScenario, rep: int, part: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([scenario.seed, rep, part])))


def _draw(scenario: SimScenario, rng: np.random.Generator, n: int):
    if scenario.x_law is XLaw.BETA_SCALED:
        x = 2 * SQRT3 * rng.beta(2.0, 2.0, n) - SQRT3
    else:
        x = rng.normal(-1.0, 1.0, n)
    z = np.column_stack([np.ones(n), rng.uniform(size=n), rng.binomial(1, 0.8, n).astype(float)])
    if scenario.u_family is UFamily.SCALED_UNIFORM:
        u = SQRT3 * rng.uniform(-1.0, 1.0, n) * scenario.sigma_u
    else:
        u = rng.normal(0.0, scenario.sigma_u, n)
    if scenario.eps_family is EpsFamily.SCALED_T3:
        eps = rng.standard_t(3, n) * scenario.sigma_eps / SQRT3
    else:
        eps = rng.normal(0.0, scenario.sigma_eps, n)
    y = scenario.spec.mean(x, z, np.asarray(scenario.beta_true)) + eps
    return Dataset(x + u, z, y), x


def generate(scenario: SimScenario, replication_index: int):
    """Dataset and latent ``x`` for one replication.

    Each ``(seed, replication_index)`` pair owns an independent Philox
    stream, so replications can run in any order.
    """
    return _draw(scenario, _stream(scenario, replication_index), scenario.n)


def generate_test(scenario: SimScenario, replication_index: int, size: int | None = None):
    """Fresh test sample for out-of-sample coverage (separate stream)."""
    return _draw(scenario, _stream(scenario, replication_index, 1), size or scenario.test_size)


def midpoint_grid(lo: float, hi: float, m: int) -> np.ndarray:
    """``m`` evenly spaced cell midpoints of ``(lo, hi)``."""
    return lo + (np.arange(m) + 0.5) * (hi - lo) / m


def true_beta_grid_prior(m: int = 30, lo: float = -SQRT3, hi: float = SQRT3) -> WorkingPrior:
    """Beta(2, 2) density on a grid over ``(lo, hi)``, renormalised."""
    if not hi > lo:
        raise InvalidInputError("prior bounds need lo < hi")
    grid = midpoint_grid(lo, hi, m)
    return WorkingPrior.from_weights(grid, stats.beta.pdf((grid - lo) / (hi - lo), 2, 2))


def uniform_prior(lo: float, hi: float, m: int = 30) -> WorkingPrior:
    if not hi > lo:
        raise InvalidInputError("prior bounds need lo < hi")
    return WorkingPrior.from_weights(midpoint_grid(lo, hi, m), np.ones(m))


def moment_uniform_prior(w, sigma_u: float, m: int = 30):
    """Equal masses on a grid over ``mean(W) +- 3 sd_x``.

    ``sd_x^2 = max(var(W) - sigma_u^2, 0.01 var(W))``; returns the prior and
    whether the floor was used.
    """
    w = np.asarray(w, dtype=float)
    if len(w) < 2:
        raise InvalidInputError("moment prior needs at least two observations")
    mu = float(np.mean(w))
    var_w = float(np.var(w, ddof=1))
    raw = var_w - sigma_u ** 2
    floored = raw < 0.01 * var_w
    sd = math.sqrt(max(raw, 0.01 * var_w))
    grid = midpoint_grid(mu - 3 * sd, mu + 3 * sd, m)
    return WorkingPrior.from_weights(grid, np.ones(m)), floored


def build_prior(scenario: SimScenario, data: Dataset | None = None) -> list:
    """One working prior per z-group (the same law in every group)."""
    if scenario.prior_mode is PriorMode.TRUE_BETA_GRID:
        prior = true_beta_grid_prior(scenario.m_grid)
    else:
        if data is None or data.n == 0:
            raise InvalidInputError("MOMENT_UNIFORM needs data")
        prior, floored = moment_uniform_prior(data.w, scenario.sigma_u, scenario.m_grid)
        if floored:
            warnings.warn("var(W) - sigma_u^2 below 1% of var(W); variance floor used",
                          PriorFloorWarning, stacklevel=2)
    return [WorkingPrior(prior.support, prior.masses, g) for g in range(scenario.n_groups)]


def group_priors(priors: list, z) -> PriorSet:
    """Attach priors to K-means groups of the non-constant ``z`` columns."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if len(priors) == 1:
        return PriorSet.single(priors[0])
    if len(priors) != 2:
        raise InvalidInputError("z-grouping supports one or two groups")
    varying = np.ptp(z, axis=0) > 0
    if not varying.any():
        return PriorSet.single(priors[0])
    km = kmeans2(z[:, varying])
    if km.degenerate or len(np.unique(km.assignments)) < 2:
        return PriorSet.single(priors[0])
    centroids = np.stack([z[km.assignments == k].mean(axis=0) for k in range(2)])
    return PriorSet(tuple(priors), centroids)


def scenario_priors(scenario: SimScenario, data: Dataset) -> PriorSet:
    return group_priors(build_prior(scenario, data), data.z)


PRIOR_MODES = ("moment_uniform", "beta_grid", "uniform")


def prior_builder(mode: str = "moment_uniform", m_grid: int = 30, n_groups: int = 2,
                  sigma_u: float = 0.3, bounds=None):
    """``Dataset -> PriorSet`` for user data.

    ``moment_uniform`` matches the first two moments of ``X`` from ``W``;
    ``beta_grid`` and ``uniform`` use fixed ``bounds`` (``beta_grid``
    defaults to ``(-sqrt 3, sqrt 3)``).
    """
    if mode not in PRIOR_MODES:
        raise InvalidInputError(f"prior mode must be one of {PRIOR_MODES}, got {mode!r}")
    if n_groups not in (1, 2):
        raise InvalidInputError("n_groups must be 1 or 2")
    if mode == "uniform" and bounds is None:
        raise InvalidInputError("uniform prior needs bounds")

    def build(data: Dataset) -> PriorSet:
        if mode == "moment_uniform":
            prior, floored = moment_uniform_prior(data.w, sigma_u, m_grid)
            if floored:
                warnings.warn("var(W) - sigma_u^2 below 1% of var(W); variance floor used",
                              PriorFloorWarning, stacklevel=2)
        elif mode == "beta_grid":
            prior = true_beta_grid_prior(m_grid, *(bounds or (-SQRT3, SQRT3)))
        else:
            prior = uniform_prior(bounds[0], bounds[1], m_grid)
        priors = [WorkingPrior(prior.support, prior.masses, g) for g in range(n_groups)]
        return group_priors(priors, data.z)
    return build


def pipeline_config(scenario: SimScenario) -> PipelineConfig:
    init = np.asarray(scenario.beta_true) if scenario.beta_init == "truth" else None
    return PipelineConfig(scenario.spec, lambda d: scenario_priors(scenario, d), scenario.alpha,
                          init, scenario.fallback, scenario.newton_max_iter, scenario.split_fraction)


def run_six_methods(data: Dataset, scenario: SimScenario, split_seed: int = 0,
                    methods=None) -> dict:
    """Map method name -> :class:`MethodOutcome` for the scenario's methods."""
    methods = scenario.methods if methods is None else methods
    return fit_methods(data, pipeline_config(scenario), methods, split_seed)


def evaluate(lower, upper, y):
    """In-sample coverage fraction and mean interval length."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (lower.shape == upper.shape == y.shape):
        raise InvalidInputError("need one interval per row")
    if len(y) == 0:
        raise InvalidInputError("no rows to evaluate")
    cp = float(np.mean((y >= lower) & (y <= upper)))
    return cp, float(np.mean(upper - lower))


def run_replication(scenario: SimScenario, rep: int) -> list:
    """One replication; returns one record per selected method."""
    data, _ = generate(scenario, rep)
    test = generate_test(scenario, rep)[0] if scenario.test_size > 0 else None
    with warnings.catch_warnings(), audit() as diag:
        warnings.simplefilter("ignore", PriorFloorWarning)
        outcomes = run_six_methods(data, scenario, split_seed=rep)
    records = []
    for name, oc in outcomes.items():
        rec = {"method": name, "model": scenario.model, "n": scenario.n, "rep": rep,
               "cp": math.nan, "lpi": math.nan, "error": oc.error or ""}
        if oc.ok:
            rec["cp"], rec["lpi"] = evaluate(oc.lower, oc.upper, data.y)
            if test is not None:
                c = np.asarray(oc.center_fn(test.w, test.z), dtype=float)
                rec["cp_test"] = evaluate(c - oc.estimate.zeta_hat, c + oc.estimate.zeta_hat, test.y)[0]
            if "beta_converged" in oc.estimate.diagnostics:
                rec["beta_converged"] = oc.estimate.diagnostics["beta_converged"]
        records.append(rec)
    # systems are shared between methods, so the audit is per replication
    fred = diag.as_dict()
    for rec in records:
        rec["fredholm"] = fred
    return records


def _safe_replication(args):
    scenario, rep = args
    try:
        return rep, run_replication(scenario, rep), None
    except Exception as exc:
        return rep, [], f"{type(exc).__name__}: {exc}"


@dataclass
class SimResult:
    scenario: SimScenario
    records: list
    failed_replications: dict = field(default_factory=dict)

    def values(self, method: str, key: str = "lpi") -> np.ndarray:
        return np.array([r[key] for r in self.records
                         if r["method"] == method and not r["error"]], dtype=float)

    def aggregate(self) -> dict:
        """Mean and SD of CP and LPI per method (SD ``None`` with one replication)."""
        table = {}
        for m in METHODS:
            rows = [r for r in self.records if r["method"] == m]
            if not rows:
                continue
            cp = self.values(m, "cp")
            lpi = self.values(m, "lpi")
            k = len(cp)
            entry = {"model": self.scenario.model, "n": self.scenario.n, "ok": k,
                     "errors": len(rows) - k,
                     "cp_mean": float(cp.mean()) if k else None,
                     "cp_sd": float(cp.std(ddof=1)) if k > 1 else None,
                     "lpi_mean": float(lpi.mean()) if k else None,
                     "lpi_sd": float(lpi.std(ddof=1)) if k > 1 else None}
            if any("cp_test" in r for r in rows):
                ct = self.values(m, "cp_test")
                entry["cp_test_mean"] = float(ct.mean()) if len(ct) else None
            table[m] = entry
        return table

    def fredholm_summary(self) -> dict:
        """Worst-case Fredholm checks over all replications."""
        seen = {r["rep"]: r["fredholm"] for r in self.records if "fredholm" in r}
        docs = list(seen.values())
        return {"replications": len(docs),
                "n_systems": sum(d["n_systems"] for d in docs),
                "n_solves": sum(d["n_solves"] for d in docs),
                "max_row_sum_error": max((d["max_row_sum_error"] for d in docs), default=0.0),
                "max_relative_residual": max((d["max_relative_residual"] for d in docs), default=0.0)}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "model", "n", "rep", "cp", "lpi"])
        for r in sorted(self.records, key=lambda r: (r["rep"], METHODS.index(r["method"]))):
            cp = "" if r["error"] else repr(float(r["cp"]))
            lpi = "" if r["error"] else repr(float(r["lpi"]))
            writer.writerow([r["method"], r["model"], r["n"], r["rep"], cp, lpi])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_json(self, path=None) -> str:
        doc = {"scenario": self.scenario.as_dict(), "aggregate": self.aggregate(),
               "fredholm": self.fredholm_summary(),
               "failed_replications": {str(k): v for k, v in self.failed_replications.items()},
               "method_errors": [{"method": r["method"], "rep": r["rep"], "error": r["error"]}
                                 for r in self.records if r["error"]]}
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def format_table(self) -> str:
        lines = [f"{'method':<6} {'CP (SD)':>18} {'LPI (SD)':>18}"]
        for m, e in self.aggregate().items():
            def cell(mean, sd):
                if mean is None:
                    return "-"
                return f"{mean:.3f} ({sd:.3f})" if sd is not None else f"{mean:.3f}"
            lines.append(f"{m:<6} {cell(e['cp_mean'], e['cp_sd']):>18} {cell(e['lpi_mean'], e['lpi_sd']):>18}")
        return "\n".join(lines)


def replicate(scenario: SimScenario, threads: int | None = None, progress=None) -> SimResult:
    """Run all replications (in worker processes when ``threads > 1``).

    Results are reduced in replication order, so the output does not depend
    on scheduling. Failed replications are excluded and counted; more than
    5% failures raises :class:`ReplicationAbort` carrying the partial result.
    """
    threads = (os.cpu_count() or 1) if threads is None else max(1, int(threads))
    jobs = [(scenario, r) for r in range(scenario.replications)]
    if threads == 1 or len(jobs) == 1:
        results = []
        for job in jobs:
            results.append(_safe_replication(job))
            if progress is not None:
                progress(results[-1])
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_safe_replication, jobs))
    results.sort(key=lambda t: t[0])
    records, failed = [], {}
    for rep, recs, err in results:
        if err is not None:
            failed[rep] = err
        records.extend(recs)
    result = SimResult(scenario, records, failed)
    if len(failed) > 0.05 * scenario.replications:
        raise ReplicationAbort(f"{len(failed)} of {scenario.replications} replications failed", result)
    return result


def with_overrides(scenario: SimScenario, **kw) -> SimScenario:
    return replace(scenario, **kw)


__all__ = ["METHODS", "PRIOR_MODES", "MethodOutcome", "PriorFloorWarning", "PriorMode",
           "ReplicationAbort", "SimResult", "SimScenario", "XLaw", "build_prior", "evaluate",
           "generate", "generate_test", "group_priors", "midpoint_grid", "moment_uniform_prior",
           "pipeline_config", "prior_builder", "replicate", "run_replication", "run_six_methods",
           "scenario_priors", "true_beta_grid_prior", "uniform_prior", "with_overrides"]
