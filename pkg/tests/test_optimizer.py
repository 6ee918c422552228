import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from survdtr.dataset import Dataset, build_time_grid
from survdtr.estimator import SurrogateParams, SurvivalProblem, km_value_smooth
from survdtr.geometry import PolicySet, build_simplex
from survdtr.optimizer import (
    CalibrationError,
    FitConfig,
    PenalizedObjective,
    bb_ascent,
    compute_cq,
    fit_policy,
    inflection_point,
)
from survdtr.propensity import UniformPropensity

from conftest import random_dataset


def fd_gradient(fun, theta, h=1e-5):
    g = np.zeros_like(theta)
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        g[j] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return g


def make_objective(data, t_g, b, u0, lam, m_g=None):
    grid = build_time_grid(data, t_g)
    prob = SurvivalProblem(data, grid, UniformPropensity(data.K))
    template = PolicySet.zeros(data.p, data.K, m_g or grid.m_g, data.stage_boundaries)
    return PenalizedObjective(prob, template, SurrogateParams(b, u0), lam), template


def one_stage(times, events, K=2, p=1, X=None):
    n = len(times)
    return Dataset(
        ids=np.array([f"s{i}" for i in range(n)], dtype=object),
        time=np.asarray(times, dtype=float),
        event=np.asarray(events, dtype=bool),
        covariates=np.zeros((n, 1, p)) if X is None else X,
        treatments=np.ones((n, 1), dtype=int),
        K=K,
        stage_boundaries=(0.0,),
    )


def test_cq_without_failures():
    data = one_stage([1.0, 2.0, 3.0], [False, False, True])
    grid = build_time_grid(data, 1.5)
    cq = compute_cq(data, grid, UniformPropensity(2))
    assert cq == 0.0
    assert inflection_point(cq, 0.3) == 0.0


def test_cq_single_failure_by_hand():
    # four subjects at risk at 0.5 with equal weights, one fails: ratio 1/4
    data = one_stage([0.5, 1.0, 2.0, 3.0], [True, False, True, True])
    grid = build_time_grid(data, 0.8)
    assert compute_cq(data, grid, UniformPropensity(2), cbar=0.5) == pytest.approx(np.log(1 - 2 * 0.25), abs=1e-15)
    assert compute_cq(data, grid, UniformPropensity(2), cbar=0.4) == pytest.approx(np.log(1 - 0.25 / 0.4), abs=1e-15)


def test_cq_reports_grid_point():
    data = one_stage([0.5, 1.0, 2.0], [True, True, False])
    grid = build_time_grid(data, 1.5)
    with pytest.raises(CalibrationError) as info:
        compute_cq(data, grid, UniformPropensity(2))
    assert info.value.s == 2


def test_doubling_lambda_halves_u0():
    assert inflection_point(-1.3, 0.2) == pytest.approx(2 * inflection_point(-1.3, 0.4))


def test_objective_at_zero_is_log_smooth_km(rng):
    data = random_dataset(rng, n=30, M=2, p=4)
    obj, template = make_objective(data, 1.7, 3.0, -0.8, 0.1)
    theta = np.zeros(template.n_params)
    value, _ = km_value_smooth(data, template, build_simplex(3), SurrogateParams(3.0, -0.8), UniformPropensity(3), 1.7)
    assert obj(theta) == pytest.approx(np.log(value), abs=1e-12)
    assert obj(theta) <= 0.0


def test_penalty_only_change_on_dead_covariate(rng):
    data = random_dataset(rng, n=30, M=1, p=3, width=2.0)
    X = data.covariates.copy()
    X[:, :, 0] = 0.0
    data = Dataset(data.ids, data.time, data.event, X, data.treatments, 3, data.stage_boundaries)
    obj, template = make_objective(data, 1.5, 2.0, -0.5, 0.25)
    theta = rng.normal(size=template.n_params)
    moved = theta.copy()
    moved[0] += 3.0  # coefficient on the all-zero covariate, first score row
    expected = -0.25 * (np.linalg.norm(moved) - np.linalg.norm(theta))
    assert obj(moved) - obj(theta) == pytest.approx(expected, abs=1e-12)
    g = obj.value_and_grad(theta)[1]
    assert g[0] == pytest.approx(-0.25 * theta[0] / np.linalg.norm(theta), abs=1e-12)


def test_penalty_gradient_single_entry():
    data = one_stage([1.0, 2.0], [False, False], K=3, p=2, X=np.ones((2, 1, 2)))
    obj, template = make_objective(data, 0.5, 1.0, 0.0, 0.7)
    theta = np.zeros(template.n_params)
    theta[3] = 2.5
    g = obj.value_and_grad(theta)[1]
    expected = np.zeros_like(theta)
    expected[3] = -0.7
    np.testing.assert_allclose(g, expected, atol=1e-15)
    # subgradient convention at the origin
    np.testing.assert_array_equal(obj.value_and_grad(np.zeros_like(theta))[1], 0.0)


@given(st.integers(0, 100_000))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n=30, M=2, p=4, width=1.0)
    obj, template = make_objective(data, 1.8, rng.uniform(0.5, 4.0), rng.uniform(-1.0, 0.0), rng.uniform(0.01, 0.5), m_g=2)
    theta = rng.uniform(-0.5, 0.5, size=template.n_params)
    value, grad = obj.value_and_grad(theta)
    assert value == pytest.approx(obj(theta), abs=1e-12)
    fd = fd_gradient(obj, theta)
    assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_gradient_ignores_zero_feature_except_penalty(rng):
    data = random_dataset(rng, n=30, M=1, p=3, width=2.0)
    X = data.covariates.copy()
    X[:, :, 2] = 0.0
    data = Dataset(data.ids, data.time, data.event, X, data.treatments, 3, data.stage_boundaries)
    obj, template = make_objective(data, 1.5, 2.0, -0.3, 0.0 + 1e-9)
    g = obj.value_and_grad(rng.normal(size=template.n_params))[1]
    # layout per row: 3 coefficients; two rows then two intercepts
    assert abs(g[2]) < 1e-8 and abs(g[5]) < 1e-8


def quadratic(a, A):
    def fun(theta):
        d = theta - a
        return -0.5 * d @ A @ d, -A @ d

    return fun


def test_bb_reaches_quadratic_maximum():
    rng = np.random.default_rng(4)
    Q = rng.normal(size=(6, 6))
    A = Q @ Q.T + np.eye(6)
    a = rng.normal(size=6)
    config = FitConfig(t_g=1.0, epsilon=1e-20, max_iter=50)
    theta, value, trace, converged, iters = bb_ascent(quadratic(a, A), np.zeros(6), config)
    assert iters <= 50
    np.testing.assert_allclose(theta, a, atol=1e-6)


def test_bb_fixed_point():
    a = np.array([1.0, -2.0])
    theta, value, trace, converged, iters = bb_ascent(quadratic(a, np.eye(2)), a.copy(), FitConfig(t_g=1.0))
    assert converged and iters == 1
    np.testing.assert_array_equal(theta, a)


def test_bb_returns_best_iterate():
    rng = np.random.default_rng(9)
    A = np.diag([1.0, 50.0, 400.0])
    fun = quadratic(np.ones(3), A)
    init = rng.normal(size=3)
    theta, value, trace, _, _ = bb_ascent(fun, init, FitConfig(t_g=1.0, max_iter=7, eta0=0.05))
    assert value >= fun(init)[0]
    assert value == max(trace) == fun(theta)[0]
    assert np.all(np.diff(np.maximum.accumulate(trace)) >= 0)


def test_bb_rejects_nonfinite_start():
    with pytest.raises(ValueError):
        bb_ascent(lambda t: (np.nan, np.zeros(1)), np.zeros(1), FitConfig(t_g=1.0))


def test_fit_policy_is_deterministic(rng):
    data = random_dataset(rng, n=40, M=2, p=3, event_rate=0.3)
    config = FitConfig(t_g=1.5, lam=0.5, b=1.0, n_starts=2, epsilon=1e-8, max_iter=40)
    first = fit_policy(data, config, UniformPropensity(3))
    second = fit_policy(data, config, UniformPropensity(3))
    np.testing.assert_array_equal(first.theta, second.theta)
    assert first.iterations <= config.max_iter
    assert np.all(np.isfinite(first.objective_trace))
    assert first.policy.m_g == build_time_grid(data, 1.5).m_g
    assert first.u0 == inflection_point(first.cq, 0.5)


def test_fit_policy_improves_on_start(rng):
    data = random_dataset(rng, n=40, M=2, p=3, event_rate=0.3)
    config = FitConfig(t_g=1.5, lam=0.05, b=2.0, n_starts=1, epsilon=1e-10, max_iter=60)
    init = np.random.default_rng(1).uniform(-0.1, 0.1, size=PolicySet.zeros(3, 3, 2, (0, 1)).n_params)
    fit = fit_policy(data, config, UniformPropensity(3), init_theta=init)
    obj, _ = make_objective(data, 1.5, 2.0, fit.u0, 0.05)
    assert fit.objective >= obj(init)


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        FitConfig(t_g=1.0, lam=0.0)
    with pytest.raises(ValueError):
        FitConfig(t_g=1.0, step_bounds=(1.0, 0.5))
    with pytest.raises(ValueError):
        FitConfig(t_g=1.0, cbar=0.7)
    c = FitConfig(t_g=1.4, lam=0.3, b=7.0)
    doc = c.to_dict()
    assert doc["lambda"] == 0.3
    assert FitConfig.from_dict(doc) == c
    with pytest.raises(ValueError):
        FitConfig.from_dict({"t_g": 1.0, "bogus": 1})


def test_gradient_is_finite_when_surrogate_underflows(rng):
    data = random_dataset(rng, n=30, M=2, p=4, width=1.0)
    obj, template = make_objective(data, 1.8, 200.0, 5.0, 0.1, m_g=2)
    theta = rng.uniform(-0.01, 0.01, size=template.n_params)
    with np.errstate(over="raise", divide="raise", invalid="raise"):
        value, grad = obj.value_and_grad(theta)
    assert np.isfinite(value) and np.all(np.isfinite(grad))
    fd = fd_gradient(obj, theta)
    assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_gradient_is_finite_for_widely_spread_weights(rng):
    # scores of order 10 with b = 200 spread log-weights over thousands
    data = random_dataset(rng, n=60, M=2, p=4, width=1.0)
    obj, template = make_objective(data, 1.8, 200.0, -1.0, 0.1, m_g=2)
    theta = rng.normal(scale=5.0, size=template.n_params)
    with np.errstate(over="raise", divide="raise", invalid="raise"):
        value, grad = obj.value_and_grad(theta)
    assert np.isfinite(value) and np.all(np.isfinite(grad))
    assert value == pytest.approx(obj(theta), abs=1e-12)
