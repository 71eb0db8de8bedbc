import math
import warnings
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from scipy.stats import norm

from oracles.quadrature import gh_loglik
from panelselect.data import ModelSpec, PersonDesign, build_design_matrices, make_dataset
from panelselect.dgp import DEFAULT_PARAMS, simulate_panel
from panelselect.errors import NonIdentifiedError, SingularHessianError, StartPointError
from panelselect.normal import DrawMatrix, generate_draws
from panelselect.stage1 import (SimulatedLikelihood, Stage1Config, Stage1Params, conditional_person_likelihood,
                                fit_probit, fit_stage1, implied_error_correlation, random_effects_correlation,
                                simulated_loglik, simulated_person_likelihood, stage1_standard_errors)

NO_EXCLUSION = dict(allow_nonlinear_identification=True)


def person(z=(), a=(), x=(), e=()):
    z = np.asarray(z, float).reshape(len(a), -1) if len(a) else np.zeros((0, 1))
    x = np.asarray(x, float).reshape(len(e), -1)
    return PersonDesign(z, np.asarray(a, float), np.arange(2, 2 + len(a)), x, np.asarray(e, float),
                        np.arange(1, 1 + len(e)))


# -- likelihood building blocks ------------------------------------------------------


def test_conditional_likelihood_hand_values():
    p0 = Stage1Params([0.0], [0.0])
    assert conditional_person_likelihood(person(e=[1], x=[1.0]), (0, 0), p0) == 0.5
    two = person(z=[1.0], a=[1], x=[1.0, 1.0], e=[1, 0])
    assert conditional_person_likelihood(two, (0, 0), p0) == pytest.approx(0.125, abs=1e-15)
    leave = person(z=[1.0], a=[0], x=[1.0], e=[1])
    assert conditional_person_likelihood(leave, (0, 0), Stage1Params([1.0], [0.0])) == pytest.approx(
        0.5 * (1 - 0.841344746), abs=1e-7)
    assert conditional_person_likelihood(leave, (0, 0), Stage1Params([1.0], [0.0])) == pytest.approx(0.0793275, abs=1e-6)


def test_simulated_person_likelihood_degenerate_cases():
    pd_ = person(z=[0.3], a=[1], x=[1.0, -0.4], e=[1, 0])
    p = Stage1Params([0.2], [0.5])
    exact = conditional_person_likelihood(pd_, (0, 0), p)
    draws = np.random.default_rng(0).standard_normal((17, 2))
    assert simulated_person_likelihood(pd_, draws, p) == exact
    p1 = replace(p, s1=0.7, s2=-0.2, s3=1.1)
    assert simulated_person_likelihood(pd_, np.zeros((1, 2)), p1) == exact


def test_simulated_person_likelihood_converges_to_half():
    one = person(x=[1.0], e=[1])
    p = Stage1Params([0.0], [0.0], s3=1.0)
    draws = generate_draws(1, 1, 2000).values[0]
    assert abs(simulated_person_likelihood(one, draws, p) - 0.5) <= 0.02
    x, w = np.polynomial.hermite_e.hermegauss(40)
    assert w @ norm.cdf(x) / w.sum() == pytest.approx(0.5, abs=1e-12)


def tiny_design():
    f = pd.DataFrame({
        "person_id": ["a", "a"], "wave": [1, 2], "responded": [1, 1], "employed": [1.0, 0.0],
        "log_wage": [1.0, np.nan], "weight": [1.0, 1.0], "z": [1.0, 1.0], "x": [1.0, 1.0],
    })
    spec = ModelSpec((), (), (), **NO_EXCLUSION)
    return build_design_matrices(make_dataset(f, ["z", "x"]), spec)


def test_simulated_loglik_single_person():
    d = tiny_design()
    v = simulated_loglik(d, generate_draws(0, 1, 5), Stage1Params([0.0], [0.0]))
    assert v == pytest.approx(math.log(0.125), abs=1e-12)
    assert v == pytest.approx(-2.0794, abs=1e-4)


def test_vectorized_matches_reference_path(small_design):
    d = small_design
    draws = generate_draws(2, d.n_persons, 15)
    p = Stage1Params(np.full(d.attrition.k, 0.1), np.full(d.employment.k, -0.1), 0.4, -0.3, 0.8)
    fast = SimulatedLikelihood(d, draws).person_loglik(p.vector())
    slow = [math.log(simulated_person_likelihood(d.person(i), draws.values[i], p)) for i in range(40)]
    np.testing.assert_allclose(fast[:40], slow, rtol=1e-12, atol=1e-12)


def test_duplication_and_weights(small_design):
    d = small_design
    n = d.n_persons
    draws = generate_draws(3, n, 10)
    p = Stage1Params(np.zeros(d.attrition.k), np.zeros(d.employment.k), 0.2, 0.3, 0.9)
    base = simulated_loglik(d, draws, p)
    idx = np.r_[np.arange(n), np.arange(n)]
    doubled = simulated_loglik(d.take(idx), draws.take(idx), p)
    weighted = simulated_loglik(d, draws, p, weights=2.0)
    assert doubled == pytest.approx(2 * base, abs=1e-12)
    assert abs(weighted - doubled) <= 1e-12


def test_permutation_and_thread_invariance(small_design):
    d = small_design
    n = d.n_persons
    draws = generate_draws(4, n, 12)
    p = Stage1Params(np.full(d.attrition.k, 0.3), np.full(d.employment.k, 0.1), 0.5, 0.2, 0.7)
    base = simulated_loglik(d, draws, p)
    perm = np.random.default_rng(1).permutation(n)
    assert abs(simulated_loglik(d.take(perm), draws.take(perm), p) - base) <= 1e-9
    obj1 = SimulatedLikelihood(d, draws, chunk_size=37, n_jobs=1)
    obj4 = SimulatedLikelihood(d, draws, chunk_size=37, n_jobs=4)
    l1, g1 = obj1.loglik_and_grad(p.vector())
    l4, g4 = obj4.loglik_and_grad(p.vector())
    assert l1 == l4 and np.array_equal(g1, g4)
    assert abs(l1 - base) <= 1e-9


def test_sign_normalization_invariance(small_design):
    d = small_design
    draws = generate_draws(5, d.n_persons, 10)
    p = Stage1Params(np.full(d.attrition.k, 0.2), np.full(d.employment.k, 0.1), 0.3, -0.4, 0.9)
    q = replace(p, s1=-0.3, s2=0.4, s3=-0.9)
    assert simulated_loglik(d, draws, p) == simulated_loglik(d, draws, q)
    assert q.normalized().s3 == 0.9 and q.normalized().s1 == 0.3


def test_analytic_gradient_matches_finite_differences(small_design):
    d = small_design
    obj = SimulatedLikelihood(d, generate_draws(6, d.n_persons, 10))
    rng = np.random.default_rng(7)
    for _ in range(10):
        x = rng.normal(0, 0.5, obj.dim)
        x[-1] = abs(x[-1]) + 0.2
        _, g = obj.loglik_and_grad(x)
        fd = np.empty_like(x)
        for j in range(len(x)):
            h = 1e-5 * max(1.0, abs(x[j]))
            e = np.zeros_like(x)
            e[j] = h
            fd[j] = (obj.loglik(x + e) - obj.loglik(x - e)) / (2 * h)
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))


def test_quadrature_oracle_small_problem():
    p = replace(DEFAULT_PARAMS, T=3)
    d = build_design_matrices(simulate_panel(p, 60, seed=2), p.model_spec())
    params = Stage1Params(np.array(p.theta), np.array(p.alpha), p.s1, p.s2, p.s3)
    exact = gh_loglik(d, params)
    err = {R: abs(simulated_loglik(d, generate_draws(8, d.n_persons, R), params) - exact) for R in (10, 1000)}
    assert err[1000] <= 0.01 * abs(exact)
    assert err[1000] < err[10]


# -- correlation diagnostics ------------------------------------------------------------


def test_implied_error_correlation_values():
    assert implied_error_correlation(Stage1Params([0], [0], -0.0025, 0.0286, 2.2024)) == pytest.approx(0.0260, abs=5e-5)
    assert implied_error_correlation(Stage1Params([0], [0], 0.7, 0.0, 1.3)) == 0.0
    assert implied_error_correlation(Stage1Params([0], [0], 0.0, 1.0, 1.0)) == pytest.approx(0.5, abs=1e-15)
    assert random_effects_correlation(Stage1Params([0], [0], -0.0025, 0.0286, 2.2024)) == pytest.approx(0.996, abs=1e-3)


# -- estimation -------------------------------------------------------------------------


def intercept_only(k=300, n=1000):
    f = pd.DataFrame({
        "person_id": [f"{i:04d}" for i in range(n)], "wave": 1, "responded": 1,
        "employed": (np.arange(n) < k).astype(float), "log_wage": np.where(np.arange(n) < k, 1.0, np.nan),
        "weight": 1.0,
    })
    return build_design_matrices(make_dataset(f, []), ModelSpec((), (), (), **NO_EXCLUSION))


def test_intercept_only_probit_and_analytic_se():
    d = intercept_only()
    fit = fit_stage1(d, Stage1Config(freeze_loadings=True, seed=1))
    c = norm.ppf(0.3)
    assert fit.params.alpha[0] == pytest.approx(c, abs=1e-3)
    assert fit.params.alpha[0] == pytest.approx(-0.5244, abs=1e-3)
    se_true = math.sqrt(0.3 * 0.7 / (1000 * norm.pdf(c) ** 2))
    se = fit.se[list(fit.names).index("employment:const")]
    assert se == pytest.approx(se_true, rel=0.01)
    # the quoted reference figure 0.0409 sits 2% below the formula's 0.0417
    assert se == pytest.approx(0.0409, rel=0.10)
    assert fit.convergence == "converged"


def test_frozen_loadings_reduce_to_separate_probits(small_design):
    d = small_design
    fit = fit_stage1(d, Stage1Config(freeze_loadings=True, seed=1, gtol=1e-9))
    theta = sm.Probit(d.attrition.y, d.attrition.X).fit(disp=0, tol=1e-12).params
    alpha = sm.Probit(d.employment.y, d.employment.X).fit(disp=0, tol=1e-12).params
    np.testing.assert_allclose(fit.params.theta, theta, atol=1e-6)
    np.testing.assert_allclose(fit.params.alpha, alpha, atol=1e-6)
    np.testing.assert_allclose(fit_probit(d.employment.X, d.employment.y), alpha, atol=1e-6)
    assert np.isnan(fit.se[-3:]).all()


@pytest.fixture(scope="module")
def small_fit(small_design):
    return fit_stage1(small_design, Stage1Config(seed=3))


def test_fit_properties(small_fit, small_design):
    fit = small_fit
    assert fit.convergence == "converged"
    assert fit.gradient_norm <= 1e-6
    assert fit.params.s3 >= 0
    assert fit.R_used == 50 and fit.seed == 3
    assert np.all(np.diff(fit.trace) <= 1e-12)  # objective is -loglik / n
    cov = fit.covariance
    assert np.max(np.abs(cov - cov.T)) <= 1e-10
    assert np.linalg.eigvalsh(cov).min() >= -1e-8
    assert np.isfinite(fit.se).all()
    draws = generate_draws(3, small_design.n_persons, 50)
    assert fit.loglik == pytest.approx(simulated_loglik(small_design, draws, fit.params), abs=1e-8)


def test_standard_errors_recomputed(small_fit, small_design):
    draws = generate_draws(3, small_design.n_persons, 50)
    cov = stage1_standard_errors(small_design, draws, small_fit.params)
    np.testing.assert_allclose(cov, small_fit.covariance, rtol=1e-6, atol=1e-12)


def test_fit_reproducible_and_warm_start(small_fit, small_design):
    again = fit_stage1(small_design, Stage1Config(seed=3))
    np.testing.assert_array_equal(again.params.vector(), small_fit.params.vector())
    warm = fit_stage1(small_design, Stage1Config(seed=3, start=small_fit.params))
    np.testing.assert_allclose(warm.params.vector(), small_fit.params.vector(), atol=1e-5)


def test_max_iter_status(small_design):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_stage1(small_design, Stage1Config(seed=3, max_iter=2, polish=False, compute_covariance=False))
    assert fit.convergence == "max-iter"
    assert fit.iterations <= 2


def test_bad_start_point(small_design):
    d = small_design
    start = Stage1Params(np.full(d.attrition.k, np.nan), np.zeros(d.employment.k), 0.1, 0.1, 0.5)
    with pytest.raises(StartPointError):
        fit_stage1(d, Stage1Config(start=start))


def test_perfect_prediction_is_flagged():
    n, T = 300, 3
    rng = np.random.default_rng(0)
    f = pd.DataFrame({
        "person_id": np.repeat([f"{i:03d}" for i in range(n)], T), "wave": np.tile(np.arange(1, T + 1), n),
        "responded": 1, "employed": 1.0, "log_wage": 1.0, "weight": 1.0, "z": rng.normal(size=n * T),
        "x": rng.normal(size=n * T),
    })
    d = build_design_matrices(make_dataset(f, ["z", "x"]), ModelSpec(("z",), ("x",), (), **NO_EXCLUSION))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(NonIdentifiedError) as info:
            fit_stage1(d, Stage1Config(seed=1, freeze_loadings=True))
    assert any("const" in p for p in info.value.parameters)


def test_singular_hessian_names_direction():
    d = intercept_only()
    # a regressor that is identically zero leaves its coefficient unidentified
    emp = replace(d.employment, X=np.column_stack([d.employment.X, np.zeros(len(d.employment))]),
                  names=d.employment.names + ("zero",))
    d = replace(d, employment=emp)
    p = Stage1Params(np.zeros(d.attrition.k), np.array([norm.ppf(0.3), 0.0]))
    free = np.array([False] * d.attrition.k + [True, True, False, False, False])
    with pytest.raises(SingularHessianError, match="zero"):
        stage1_standard_errors(d, generate_draws(0, d.n_persons, 5), p, free=free)


def test_se_scale_with_sample_size():
    ses = []
    for n in (1500, 3000):
        d = build_design_matrices(simulate_panel(DEFAULT_PARAMS, n, seed=31), DEFAULT_PARAMS.model_spec())
        ses.append(fit_stage1(d, Stage1Config(seed=1)).se)
    ratio = ses[0] / ses[1]
    slopes = [1, 2, 4, 5, 6, 9]  # attrition and employment slopes, then s3
    assert np.all(np.abs(ratio[slopes] / math.sqrt(2) - 1) <= 0.15), ratio[slopes]
