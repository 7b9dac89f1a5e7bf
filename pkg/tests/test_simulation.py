import json
import math
import warnings

import numpy as np
import pytest
from scipy import stats

from mepi.alternatives import SplitPlan, conformal_fit
from mepi.exceptions import InvalidInputError
from mepi.pipeline import m1_center_fitter
from mepi.simulation import (PriorFloorWarning, SimResult, SimScenario, build_prior, evaluate,
                             generate, generate_test, midpoint_grid, moment_uniform_prior,
                             pipeline_config, replicate, run_six_methods, true_beta_grid_prior)

SQRT3 = math.sqrt(3.0)


def test_sim1_design_moments():
    sc = SimScenario.simulation("1", n=20_000)
    data, x = generate(sc, 0)
    assert abs(x.mean()) < 4 * math.sqrt(0.6 / sc.n)
    assert x.var() == pytest.approx(0.6, rel=0.03)
    assert np.all(np.abs(x) <= SQRT3)
    assert np.var(data.w - x) == pytest.approx(0.09, rel=0.05)
    assert data.z[:, 2].mean() == pytest.approx(0.8, abs=0.015)
    eps = data.y - sc.spec.mean(x, data.z, np.asarray(sc.beta_true))
    assert eps.std() == pytest.approx(0.1, rel=0.03)


def test_sim2_and_variant_laws():
    sc = SimScenario.simulation("2", n=20_000)
    _, x = generate(sc, 0)
    assert x.mean() == pytest.approx(-1.0, abs=0.05)
    a3 = SimScenario.simulation("A3", n=20_000)
    data, x = generate(a3, 0)
    u = data.w - x
    assert np.max(np.abs(u)) <= 0.3 * SQRT3 + 1e-12
    assert u.std() == pytest.approx(0.3, rel=0.03)
    eps = data.y - a3.spec.mean(x, data.z, np.asarray(a3.beta_true))
    assert stats.kurtosis(eps) > 2.0


def test_generate_deterministic_and_rep_independent():
    sc = SimScenario.simulation("1", n=50)
    a, xa = generate(sc, 4)
    b, xb = generate(sc, 4)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(xa, xb)
    c, _ = generate(sc, 5)
    assert not np.allclose(a.y, c.y)
    t, _ = generate_test(sc, 4, size=50)
    assert not np.allclose(a.y, t.y)


def test_scenario_validation():
    with pytest.raises(InvalidInputError):
        SimScenario(replications=0)
    with pytest.raises(InvalidInputError):
        SimScenario(model=4)
    with pytest.raises(InvalidInputError):
        SimScenario(methods=("m9",))
    with pytest.raises(InvalidInputError):
        SimScenario.simulation("B1")


def test_true_beta_grid_prior():
    p = true_beta_grid_prior(30)
    np.testing.assert_allclose(p.masses, p.masses[::-1], atol=1e-15)
    np.testing.assert_allclose(p.support, -p.support[::-1], atol=1e-12)
    u = (p.support + SQRT3) / (2 * SQRT3)
    dens = stats.beta.pdf(u, 2, 2)
    np.testing.assert_allclose(p.masses, dens / dens.sum(), rtol=1e-12)
    assert p.masses.sum() == 1.0


def test_midpoints():
    np.testing.assert_allclose(midpoint_grid(0, 1, 4), [0.125, 0.375, 0.625, 0.875])


def test_moment_prior_recovers_sd():
    w = np.random.default_rng(0).normal(0.0, math.sqrt(1.09), 200_000)
    prior, floored = moment_uniform_prior(w, 0.3, 30)
    assert not floored
    sd = (prior.support[-1] - prior.support[0]) / (6 * 29 / 30)
    assert sd == pytest.approx(1.0, abs=0.01)
    assert np.allclose(prior.masses, 1 / 30)


def test_moment_prior_floor_warns():
    sc = SimScenario.simulation("2", n=40, sigma_u=5.0)
    data, _ = generate(SimScenario.simulation("2", n=40), 0)
    with pytest.warns(PriorFloorWarning):
        build_prior(sc, data)


def test_evaluate_examples():
    assert evaluate([0, 0, 0], [1, 1, 1], [0.5, 2.0, 1.0]) == (2 / 3, 1.0)
    with pytest.raises(InvalidInputError):
        evaluate([0], [1, 2], [0])
    with pytest.raises(InvalidInputError):
        evaluate([], [], [])


def test_single_replication_has_no_sd():
    sc = SimScenario.simulation("1", n=60, replications=1, methods=("m3s", "m3c"))
    res = replicate(sc, threads=1)
    agg = res.aggregate()
    assert agg["m3s"]["cp_sd"] is None and agg["m3s"]["lpi_sd"] is None
    assert len(res.format_table().splitlines()) == 3
    doc = json.loads(res.to_json())
    assert doc["aggregate"]["m3c"]["ok"] == 1


def test_replicate_deterministic_outputs(tmp_path):
    sc = SimScenario.simulation("1", n=60, replications=3, methods=("m2s", "m3s", "m3c"))
    a = replicate(sc, threads=1)
    b = replicate(sc, threads=2)
    assert a.to_csv() == b.to_csv()
    assert a.to_json() == b.to_json()
    lines = a.to_csv(tmp_path / "r.csv").splitlines()
    assert lines[0] == "method,model,n,rep,cp,lpi"
    assert len(lines) == 1 + 3 * 3
    assert (tmp_path / "r.csv").read_text().splitlines() == lines
    cp = float(lines[1].split(",")[4])
    assert 0 <= cp <= 1


def test_aggregate_matches_records():
    sc = SimScenario.simulation("1", n=60, replications=3, methods=("m3s",))
    res = replicate(sc, threads=1)
    cp = res.values("m3s", "cp")
    agg = res.aggregate()["m3s"]
    assert agg["cp_mean"] == pytest.approx(cp.mean())
    assert agg["cp_sd"] == pytest.approx(cp.std(ddof=1))


def test_m1c_matches_direct_conformal_call():
    sc = SimScenario.simulation("1", n=120)
    data, _ = generate(sc, 2)
    out = run_six_methods(data, sc, split_seed=2, methods=("m1c",))["m1c"]
    cfg = pipeline_config(sc)
    plan = SplitPlan.random(data.n, 2, sc.split_fraction)
    est = conformal_fit(data, sc.alpha, plan, m1_center_fitter(cfg), sc.spec)
    assert out.ok
    assert out.estimate.zeta_hat == est.zeta_hat
    np.testing.assert_allclose(out.lower, est.center(data.w, data.z) - est.zeta_hat)


def test_six_methods_shapes():
    sc = SimScenario.simulation("1", n=80)
    data, _ = generate(sc, 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", PriorFloorWarning)
        out = run_six_methods(data, sc, split_seed=1)
    assert list(out) == ["m1s", "m1c", "m2s", "m2c", "m3s", "m3c"]
    for name, oc in out.items():
        assert oc.ok, (name, oc.error)
        np.testing.assert_allclose(oc.upper - oc.lower, 2 * oc.estimate.zeta_hat)
        assert oc.lower.shape == (80,)


def test_replication_records_fredholm_audit():
    sc = SimScenario.simulation("1", n=60, replications=1, methods=("m1s", "m1c"))
    res = replicate(sc, threads=1)
    summary = res.fredholm_summary()
    # m1s and the m1c refit each build one system per group
    assert summary["n_systems"] >= 4
    assert summary["n_solves"] > summary["n_systems"]
    assert summary["max_row_sum_error"] < 1e-6
    assert summary["max_relative_residual"] <= 1e-3
    assert json.loads(res.to_json())["fredholm"] == summary
