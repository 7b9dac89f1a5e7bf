import numpy as np
import pytest
from scipy.special import logsumexp

from mepi.exceptions import ConvergenceError
from mepi.models import Dataset, ModelSpec, Observation, PriorSet, WorkingPrior
from mepi.nls import gauss_newton
from mepi.semiparam import EfficientScoreEquation, efficient_score, fit_beta, working_score
from mepi.simulation import SimScenario, generate, scenario_priors, true_beta_grid_prior

BETA = np.array([4.0, 1.0, 1.0, 1.0, 0.5])
ZREF = np.array([1.0, 0.5, 1.0])


def test_working_score_single_point(spec):
    x1 = 0.3
    prior = WorkingPrior(np.array([x1]), np.array([1.0]))
    o = Observation(-0.2, ZREF, 5.0)
    want = spec.mean.gradient(x1, ZREF, BETA) * (o.y - spec.mean(x1, ZREF, BETA)) / 0.01
    np.testing.assert_allclose(working_score(o, BETA, prior, spec), want, rtol=1e-12)


def test_working_score_zero_at_stationary_point(spec):
    prior = WorkingPrior(np.array([0.3]), np.array([1.0]))
    o = Observation(-0.2, ZREF, float(spec.mean(0.3, ZREF, BETA)))
    np.testing.assert_allclose(working_score(o, BETA, prior, spec), 0.0, atol=1e-12)


def test_working_score_finite_difference_oracle(spec):
    prior = WorkingPrior(np.array([-1.0, 0.2, 1.1]), np.array([0.2, 0.5, 0.3]))
    o = Observation(0.4, ZREF, 6.3)

    def loglik(b):
        return logsumexp(np.log(prior.masses) + spec.log_f_y(o.y, prior.support, ZREF, b)
                         + spec.log_f_w(o.w, prior.support))

    fd = np.empty(5)
    for k in range(5):
        h = 1e-6 * (1 + abs(BETA[k]))
        e = np.zeros(5)
        e[k] = h
        fd[k] = (loglik(BETA + e) - loglik(BETA - e)) / (2 * h)
    np.testing.assert_allclose(working_score(o, BETA, prior, spec), fd, rtol=1e-5, atol=1e-5)


def test_efficient_score_zero_correction(spec):
    prior = true_beta_grid_prior(5)
    o = Observation(0.4, ZREF, 6.3)
    np.testing.assert_allclose(efficient_score(o, BETA, prior, np.zeros((5, 5)), spec),
                               working_score(o, BETA, prior, spec))


def test_efficient_score_two_point_hand(spec):
    prior = WorkingPrior(np.array([-0.5, 0.8]), np.array([0.4, 0.6]))
    o = Observation(0.1, ZREF, 5.2)
    a = np.array([[1.0, 2.0, 0.0, 0.0, -1.0], [3.0, -1.0, 0.5, 0.0, 2.0]])
    from mepi.fredholm import posterior_weights
    pi = posterior_weights(o, BETA, prior, spec)
    want = working_score(o, BETA, prior, spec) - (pi[0] * a[0] + pi[1] * a[1])
    np.testing.assert_allclose(efficient_score(o, BETA, prior, a, spec), want, rtol=1e-12)


def test_vectorised_scores_match_per_observation(sim1_small):
    sc, data, _, priors = sim1_small
    ev = EfficientScoreEquation(data, priors, sc.spec).evaluate(BETA)
    groups = priors.group_of(data.z)
    for i in (0, 7, 55):
        o = data.rows[i]
        g = groups[i]
        want = efficient_score(o, BETA, priors.priors[g], ev.a_star[g], sc.spec)
        np.testing.assert_allclose(ev.s_eff[i], want, rtol=1e-9, atol=1e-9)


def test_fit_beta_self_consistency_from_truth():
    # one Simulation-1 dataset on which the discretised equation has a root near the truth
    sc = SimScenario.simulation("1", model=1, n=500, seed=0)
    data, _ = generate(sc, 0)
    fb = fit_beta(data, sc.spec, scenario_priors(sc, data), init=BETA, max_iter=8)
    assert fb.converged and fb.iterations <= 8
    assert fb.final_eq_norm < fb.tol == pytest.approx(1e-6 * 500)


def test_fit_beta_error_free_limit_matches_nls():
    spec = ModelSpec("poly2", 0.1, 1e-6)
    prior = true_beta_grid_prior(30)
    rng = np.random.default_rng(0)
    n = 2000
    x = rng.choice(prior.support, size=n, p=prior.masses)
    z = np.column_stack([np.ones(n), rng.uniform(size=n), rng.binomial(1, 0.8, n)])
    w = x + 1e-6 * rng.standard_normal(n)
    y = spec.mean(x, z, BETA) + 0.1 * rng.standard_normal(n)
    data = Dataset(w, z, y)
    nls = gauss_newton(w, z, y, spec).beta
    fb = fit_beta(data, spec, PriorSet.single(prior), init=nls)
    J = spec.mean.gradient(w, z, nls)
    se = np.sqrt(np.diag(0.01 * np.linalg.inv(J.T @ J)))
    assert np.all(np.abs(fb.beta_hat - nls) < 3 * se)


def test_fit_beta_permutation_equivariant(sim1_small):
    sc, data, _, priors = sim1_small
    data = data.subset(np.arange(40))
    perm = np.random.default_rng(1).permutation(data.n)
    eq, eq_p = (EfficientScoreEquation(d, priors, sc.spec) for d in (data, data.subset(perm)))
    np.testing.assert_allclose(eq(BETA + 0.05), eq_p(BETA + 0.05), rtol=1e-10, atol=1e-9)
    a = fit_beta(data, sc.spec, priors, init=BETA, max_iter=3, fallback="least_squares")
    b = fit_beta(data.subset(perm), sc.spec, priors, init=BETA, max_iter=3,
                 fallback="least_squares")
    np.testing.assert_allclose(a.beta_hat, b.beta_hat, rtol=1e-6, atol=1e-8)
    np.testing.assert_array_equal(a.group_assignments[perm], b.group_assignments)


def test_fit_beta_non_convergence_carries_trace(sim1_small):
    sc, data, _, priors = sim1_small
    with pytest.raises(ConvergenceError) as info:
        fit_beta(data, sc.spec, priors, init=BETA + 0.5, tol=1e-14, max_iter=1)
    assert len(info.value.trace) >= 1


def test_fit_beta_fallback_flags_nonconvergence(sim1_small):
    sc, data, _, priors = sim1_small
    data = data.subset(np.arange(40))
    fb = fit_beta(data, sc.spec, priors, init=BETA, tol=1e-14, max_iter=1,
                  fallback="least_squares")
    assert not fb.converged
    assert np.all(np.isfinite(fb.beta_hat))


def test_fit_beta_rejects_small_n(spec):
    data = Dataset.from_arrays([0.0, 1.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        fit_beta(data, spec, true_beta_grid_prior(5))


def _beta_battery(n, reps=20):
    out = []
    for rep in range(reps):
        sc = SimScenario.simulation("1", model=1, n=n, seed=21)
        data, _ = generate(sc, rep)
        fb = fit_beta(data, sc.spec, scenario_priors(sc, data), init=BETA, max_iter=20,
                      fallback="least_squares")
        out.append(fb.beta_hat)
    return np.array(out)


@pytest.mark.slow
def test_beta_battery_unbiased_and_consistent():
    big = _beta_battery(500)
    se = big.std(axis=0, ddof=1) / np.sqrt(len(big))
    assert np.all(np.abs(big.mean(axis=0) - BETA) < 3 * se)
    small = _beta_battery(100)
    assert np.abs(big - BETA).mean() < np.abs(small - BETA).mean()
