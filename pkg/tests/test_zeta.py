import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from mepi.exceptions import InvalidInputError
from mepi.fredholm import build_system, posterior_weights, rhs_a1, solve
from mepi.models import (Dataset, ModelSpec, Observation, PluginCenter, PosteriorMeanCenter,
                         PriorSet, WorkingPrior)
from mepi.numerics import bisect_root
from mepi.simulation import true_beta_grid_prior
from mepi.zeta import (ZetaEstimate, ZetaProblem, c_hat, estimating_function, fit_zeta,
                       indicator_given_xz, phi_hat, phi_values, variance_v)

BETA = np.array([4.0, 1.0, 1.0, 1.0, 0.5])
ZREF = np.array([1.0, 0.5, 1.0])


class TrueMean(PluginCenter):
    """m(x, z, beta) evaluated at the latent x: only meaningful when W = X."""


def test_indicator_limits(spec):
    center = PosteriorMeanCenter(spec, PriorSet.single(true_beta_grid_prior(10)))
    assert indicator_given_xz(0.3, ZREF, BETA, 0.0, center, spec) == 0.0
    assert indicator_given_xz(0.3, ZREF, BETA, 1e6 * 0.1, center, spec) == pytest.approx(1, abs=1e-8)


@pytest.mark.parametrize("zeta", [0.05, 0.1645, 0.3])
def test_indicator_error_free_closed_form(zeta):
    spec = ModelSpec("poly2", 0.1, 1e-9)
    got = indicator_given_xz(0.7, ZREF, BETA, zeta, PluginCenter(spec), spec)
    assert got == pytest.approx(norm.cdf(zeta / 0.1) - norm.cdf(-zeta / 0.1), abs=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.floats(-2, 2), st.floats(0, 1), st.floats(0, 2), st.floats(0, 2))
def test_indicator_monotone_in_zeta(x, z1, a, b):
    spec = ModelSpec("sin_poly2", 0.1, 0.3)
    center = PosteriorMeanCenter(spec, PriorSet.single(true_beta_grid_prior(8)))
    z = np.array([1.0, z1, 1.0])
    lo, hi = sorted((a, b))
    assert (indicator_given_xz(x, z, BETA, lo, center, spec)
            <= indicator_given_xz(x, z, BETA, hi, center, spec) + 1e-12)


@pytest.fixture(scope="module")
def small_problem(sim1_small):
    sc, data, _, priors = sim1_small
    data = data.subset(np.arange(50))
    center = PosteriorMeanCenter(sc.spec, priors)
    return sc.spec, data, priors, center


def test_G_boundaries(small_problem):
    spec, data, priors, center = small_problem
    prob = ZetaProblem(data, BETA, priors, center, spec)
    assert prob.G(0.0, 0.1) == pytest.approx(50 * 0.9, abs=1e-12)
    assert prob.G(1e6, 0.1) == pytest.approx(-50 * 0.1, abs=1e-8)
    assert estimating_function(0.0, data, BETA, priors, center, spec, 0.1) == pytest.approx(45.0)


def test_G_matches_scripted_assembly(small_problem):
    spec, data, priors, center = small_problem
    zeta, alpha = 0.21, 0.1
    systems = [build_system(priors.z_ref(g), BETA, priors.priors[g], spec)
               for g in range(priors.n_groups)]
    a1 = [solve(s, rhs_a1(s, zeta, center)) for s in systems]
    total = 0.0
    for o, g in zip(data.rows, priors.group_of(data.z)):
        prior = priors.priors[g]
        pi = posterior_weights(o, BETA, prior, spec)
        cover = sum(p * indicator_given_xz(x, o.z, BETA, zeta, center, spec)
                    for x, p in zip(prior.support, prior.masses))
        total += pi @ a1[g] + (1 - alpha) - cover
    assert estimating_function(zeta, data, BETA, priors, center, spec, alpha) == pytest.approx(
        total, abs=1e-8)


def test_fit_zeta_bracket_and_row_order(small_problem):
    spec, data, priors, center = small_problem
    est = fit_zeta(data, BETA, priors, center, 0.1, spec)
    lo, hi = est.diagnostics["bracket"]
    assert lo <= est.zeta_hat <= hi and hi - lo <= 1e-8
    assert est.density_at_zeta > 0
    perm = np.random.default_rng(0).permutation(data.n)
    est2 = fit_zeta(data.subset(perm), BETA, priors, center, 0.1, spec)
    assert est2.zeta_hat == pytest.approx(est.zeta_hat, abs=1e-8)


def test_fit_zeta_rejects_alpha(small_problem):
    spec, data, priors, center = small_problem
    with pytest.raises(InvalidInputError):
        fit_zeta(data, BETA, priors, center, 1.0, spec)


def _working_model_data(rng, n, prior, spec):
    x = rng.choice(prior.support, size=n, p=prior.masses)
    z = np.column_stack([np.ones(n), rng.uniform(size=n), rng.binomial(1, 0.8, n)])
    w = x + spec.sigma_u * rng.standard_normal(n)
    y = spec.mean(x, z, BETA) + spec.sigma_eps * rng.standard_normal(n)
    return Dataset(w, z, y)


def test_fit_zeta_matches_working_model_quantile(spec):
    prior = true_beta_grid_prior(30)
    priors = PriorSet.single(prior)
    center = PosteriorMeanCenter(spec, priors)
    rng = np.random.default_rng(5)
    data = _working_model_data(rng, 400, prior, spec)
    est = fit_zeta(data, BETA, priors, center, 0.1, spec)
    prob = ZetaProblem(data, BETA, priors, center, spec)
    # quantile of r under the working joint law with Z at the sample values, by simulation
    N = 10 ** 6
    idx = rng.integers(0, data.n, N)
    x = rng.choice(prior.support, size=N, p=prior.masses)
    z = data.z[idx]
    w = x + spec.sigma_u * rng.standard_normal(N)
    y = spec.mean(x, z, BETA) + spec.sigma_eps * rng.standard_normal(N)
    r = np.abs(y - center.values(w, z, BETA))
    q_mc = np.quantile(r, 0.9)
    # the same quantile from the quadrature: root of mean_i E*[I | Z_i] = 0.9
    q_exact = bisect_root(lambda t: prob.coverage_given_z(t).mean() - 0.9, 0.0, 2.0)
    f = np.mean(np.abs(r - q_exact) < 0.005) / 0.01
    assert q_mc == pytest.approx(q_exact, abs=3 * np.sqrt(0.09 / N) / f + 1e-3)
    # the data were drawn from the working law, so zeta_hat differs only by sampling error
    assert est.zeta_hat == pytest.approx(q_exact, abs=3 * np.sqrt(0.09 / data.n) / f)


def test_phi_reduction_single_point_prior(spec):
    prior = WorkingPrior(np.array([0.2]), np.array([1.0]))
    priors = PriorSet.single(prior)
    center = PosteriorMeanCenter(spec, priors)
    o = Observation(0.1, ZREF, 5.4)
    zeta, dens = 0.15, 2.0
    want = (0.9 - indicator_given_xz(0.2, o.z, BETA, zeta, center, spec)) / dens
    got = phi_hat(o, BETA, zeta, np.zeros(5), priors, center, spec, dens)
    assert got == pytest.approx(want, abs=1e-12)
    with pytest.raises(InvalidInputError):
        phi_hat(o, BETA, zeta, np.zeros(5), priors, center, spec, 0.0)


def test_phi_values_match_phi_hat(small_problem):
    spec, data, priors, center = small_problem
    prob = ZetaProblem(data, BETA, priors, center, spec)
    c = np.array([0.01, -0.02, 0.0, 0.03, 0.01])
    vals = phi_values(prob, 0.2, c, 1.7, 0.1)
    for i in (0, 13, 49):
        assert vals[i] == pytest.approx(
            phi_hat(data.rows[i], BETA, 0.2, c, priors, center, spec, 1.7), abs=1e-10)


def test_c_hat_matches_independent_assembly(small_problem):
    from mepi.numerics import kde_at, silverman_bandwidth
    spec, data, priors, center = small_problem
    zeta = 0.2
    prob = ZetaProblem(data, BETA, priors, center, spec)
    ev = prob.evaluation
    r = prob.residuals
    h = silverman_bandwidth(r)
    f = kde_at(zeta, r, h)
    a1_post = prob.components(zeta)[0]
    dr = -np.sign(data.y - prob.center_values)[:, None] * center.beta_gradient(data.w, data.z, BETA)
    kd = norm.pdf((zeta - r) / h) / h
    vec = (kd @ dr - (r < zeta) @ ev.s_work - a1_post @ ev.a_post) / data.n / f
    M = ev.s_eff.T @ ev.s_eff / data.n
    np.testing.assert_allclose(c_hat(data, BETA, zeta, priors, center, spec, problem=prob),
                               np.linalg.solve(M, vec), rtol=1e-8)


def test_zeta_estimate_invariants():
    with pytest.raises(InvalidInputError):
        ZetaEstimate(-1.0, "semiparam", None, 1.0, 0.1)
    with pytest.raises(InvalidInputError):
        ZetaEstimate(1.0, "semiparam", -0.1, 1.0, 0.1)
    est = ZetaEstimate(0.5, "conformal", 0.04, 1.0, 0.1)
    assert est.se == pytest.approx(0.2) and est.length == 1.0
    lo, hi = est.interval([1.0, 2.0])
    np.testing.assert_allclose(hi - lo, 1.0)


@pytest.fixture(scope="module")
def fitted_sim1():
    """Simulation-1 model-1 fit (n = 500) whose beta solves the score equation."""
    from mepi.semiparam import fit_beta
    from mepi.simulation import SimScenario, generate, scenario_priors
    sc = SimScenario.simulation("1", model=1, n=500, seed=0)
    data, _ = generate(sc, 0)
    priors = scenario_priors(sc, data)
    fb = fit_beta(data, sc.spec, priors, init=BETA, max_iter=8)
    center = PosteriorMeanCenter(sc.spec, priors)
    prob = ZetaProblem(data, fb.beta_hat, priors, center, sc.spec)
    est = fit_zeta(data, fb.beta_hat, priors, center, 0.1, sc.spec, tol=1e-12, problem=prob)
    return sc.spec, data, priors, center, fb, prob, est


def test_phi_sample_mean_vanishes_at_fit(fitted_sim1):
    spec, data, priors, center, fb, prob, est = fitted_sim1
    c = c_hat(data, fb.beta_hat, est.zeta_hat, priors, center, spec, problem=prob)
    phi = phi_values(prob, est.zeta_hat, c, est.density_at_zeta, 0.1)
    # c^T sum S_eff is bounded by |c| * tol; the G term vanishes at the root
    bound = (np.abs(c).sum() * fb.final_eq_norm + 1e-6) / data.n
    assert abs(phi.mean()) <= bound + 1e-6 * np.abs(phi).mean()


def test_variance_standard_error_scale(fitted_sim1):
    spec, data, priors, center, fb, prob, est = fitted_sim1
    v1 = variance_v(data, fb.beta_hat, est.zeta_hat, priors, center, spec, problem=prob)
    se = np.sqrt(v1)
    # replication SD of zeta_hat is about 0.106 / 2 for this design
    assert 0.053 / 1.5 <= se <= 0.053 * 1.5
    v2 = variance_v(data, fb.beta_hat, est.zeta_hat, priors, center, spec, problem=prob,
                    rel_step=2e-4)
    assert v2 == pytest.approx(v1, rel=0.05)


def test_variance_reduces_to_quantile_form(spec):
    # single-point prior, W-free center: phi = ((1 - alpha) - E*[I|z]) / f with a fixed z,
    # so the sandwich collapses to the quantile variance of an exact normal model
    spec0 = ModelSpec("poly2", 0.1, 1e-9)
    prior = WorkingPrior(np.array([0.0]), np.array([1.0]))
    priors = PriorSet.single(prior)
    rng = np.random.default_rng(2)
    n = 2000
    beta = np.array([0.0, 0.0, 1.0])
    data = Dataset(np.zeros(n) + 1e-9 * rng.standard_normal(n), np.ones((n, 1)),
                   1.0 + 0.1 * rng.standard_normal(n))
    center = PosteriorMeanCenter(spec0, priors)
    est = fit_zeta(data, beta, priors, center, 0.1, spec0)
    assert est.zeta_hat == pytest.approx(0.1 * norm.ppf(0.95), abs=1e-6)
