"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Tolerances are fixed here and never adjusted to fit results.
"""
import numpy as np
import pytest

from survdtr.cli import _threads
from survdtr.dataset import Dataset, build_time_grid, history_matrix
from survdtr.estimator import SurrogateParams, SurvivalProblem, hard_weights, km_value_hard, smooth_weights
from survdtr.geometry import ConstantRule, FixedRule, PolicySet, build_simplex
from survdtr.optimizer import FitConfig
from survdtr.propensity import KnownPropensity, UniformPropensity, fit_propensity_models
from survdtr.simbench import (
    DEFAULT_GRID,
    ScenarioSpec,
    calibrate_c0,
    censoring_rate,
    evaluate_value,
    run_benchmark,
    simulate,
)

from conftest import random_dataset
from test_optimizer import fd_gradient, make_objective


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")


def textbook_km(times, events, t):
    surv = 1.0
    for u in sorted(set(times[events & (times <= t)].tolist())):
        surv *= 1.0 - np.sum((times == u) & events) / np.sum(times >= u)
    return surv


def test_criterion_01_simplex_identities(capsys):
    worst = 0.0
    for K in range(2, 11):
        V = build_simplex(K).vertices
        G = V @ V.T
        worst = max(
            worst,
            np.max(np.abs(np.diag(G) - 1.0)),
            np.max(np.abs(G[~np.eye(K, dtype=bool)] + 1.0 / (K - 1))),
            np.max(np.abs(V.sum(axis=0))),
        )
    ok = worst <= 1e-12
    report(capsys, 1, ok, f"K=2..10 worst identity error {worst:.2e} (tol 1e-12)")
    assert ok


def test_criterion_02_km_oracle(capsys):
    rng = np.random.default_rng(2)
    certain = KnownPropensity(2, lambda m, H: np.tile([1.0, 0.0], (H.shape[0], 1)))
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        times = np.round(rng.exponential(size=n), int(rng.integers(1, 4))) + 0.001
        events = rng.random(n) < rng.uniform(0.2, 0.9)
        data = Dataset(
            ids=np.array([f"s{i}" for i in range(n)], dtype=object),
            time=times,
            event=events,
            covariates=np.zeros((n, 1, 1)),
            treatments=np.ones((n, 1), dtype=int),
            K=2,
            stage_boundaries=(0.0,),
        )
        t = float(rng.uniform(0.05, times.max()))
        worst = max(worst, abs(km_value_hard(data, ConstantRule(1, 1), certain, t) - textbook_km(times, events, t)))
    ok = worst <= 1e-12
    report(capsys, 2, ok, f"100 datasets, max |weighted KM - textbook KM| = {worst:.2e} (tol 1e-12)")
    assert ok


def test_criterion_03_gradient(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        data = random_dataset(rng, n=30, M=2, p=4, K=3, width=1.0)
        obj, template = make_objective(data, 1.8, rng.uniform(0.5, 5.0), rng.uniform(-1.5, 0.0), rng.uniform(0.01, 0.5), m_g=2)
        theta = rng.uniform(-0.5, 0.5, size=template.n_params)
        grad = obj.value_and_grad(theta)[1]
        fd = fd_gradient(obj, theta, h=1e-5)
        worst = max(worst, np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12))
    ok = worst < 1e-5
    report(capsys, 3, ok, f"100 instances, max relative FD error {worst:.2e} (tol 1e-5)")
    assert ok


def _surrogate_gap(K, margin=0.01, seed=4):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n=200, M=2, p=3, K=K)
    grid = build_time_grid(data, 1.9)
    code = build_simplex(K)
    pol = PolicySet.zeros(3, K, 2, data.stage_boundaries)
    pol = pol.with_vector(rng.normal(size=pol.n_params))
    U = UniformPropensity(K)
    prob = SurvivalProblem(data, grid, U)
    clear = np.ones(data.n, dtype=bool)
    for m, u in enumerate(prob.stage_scores(pol, code)):
        clear[prob.rows[m]] &= np.abs(u) >= margin
    worst = 0.0
    for s in range(grid.g + 1):
        soft = smooth_weights(data, pol, code, SurrogateParams(1e3), U, grid, s)
        hard = hard_weights(data, pol, U, grid, s)
        worst = max(worst, float(np.max(np.abs(soft - hard)[clear])))
    return worst, int(clear.sum())


def test_criterion_04_surrogate_limit(capsys):
    worst, kept = _surrogate_gap(K=2)
    ok = worst <= 1e-6
    report(capsys, 4, ok, f"K=2, b=1e3, {kept} subjects with |score|>=0.01: max |smooth-hard| = {worst:.2e} (tol 1e-6)")
    wide, kept_wide = _surrogate_gap(K=2, margin=0.02)
    gap3, kept3 = _surrogate_gap(K=3)
    with capsys.disabled():
        print(f"[INFO] criterion 4, K=2 with |score|>=0.02: max |smooth-hard| = {wide:.2e} over {kept_wide} subjects")
        print(f"[INFO] criterion 4, K=3: max |smooth-hard| = {gap3:.3g} over {kept3} subjects")
    assert ok


BENCH_SEED = 2024


def _bench(example, rate, t_g, reps):
    spec = ScenarioSpec(example, censor_rate=rate, t_g=t_g, replications=reps, seed=BENCH_SEED)
    return run_benchmark(spec, DEFAULT_GRID, FitConfig(t_g=t_g), threads=_threads(None))


@pytest.mark.slow
@pytest.mark.parametrize(
    "number, example, rate, target, tol",
    [(5, 1, 0.74, 0.674, 0.08), (6, 2, 0.61, 0.857, 0.08), (7, 4, 0.72, 0.752, 0.09)],
)
def test_criteria_05_07_table_reproduction(capsys, number, example, rate, target, tol):
    rep = _bench(example, rate, 1.4, 30)
    ok = abs(rep.mean - target) <= tol
    report(
        capsys,
        number,
        ok,
        f"Example {example}, t_g=1.4, {rate:.0%} censoring, 30 reps: mean {rep.mean:.3f} (SD {rep.sd:.3f}); "
        f"target {target} +/- {tol}",
    )
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize(
    "example, rate, target, sd",
    [(1, 0.74, 0.586, 0.142), (2, 0.66, 0.731, 0.097), (4, 0.72, 0.659, 0.165)],
)
def test_criterion_07_soft_five_stage_rows(capsys, example, rate, target, sd):
    rep = _bench(example, rate, 2.1, 15)
    ok = abs(rep.mean - target) <= 1.5 * sd
    with capsys.disabled():
        print(
            f"\n[{'SOFT PASS' if ok else 'SOFT FAIL'}] criterion 7 (soft): Example {example}, t_g=2.1, "
            f"{rate:.0%} censoring, 15 reps: mean {rep.mean:.3f} (SD {rep.sd:.3f}); target {target} +/- {1.5 * sd:.3f}"
        )


def _stage_logloss(prop, data, m):
    rows = data.stage_mask[:, m - 1]
    P = prop.probabilities(m, history_matrix(data, m)[rows])
    A = data.treatments[rows, m - 1]
    return -float(np.mean(np.log(P[np.arange(len(A)), A - 1])))


def test_criterion_08_propensity_recovery(capsys):
    stages = (1, 2, 3)
    spec3 = ScenarioSpec(3, censor_rate=0.61, seed=81)
    train, _ = simulate(spec3, n=2000, seed=81)
    held, truth = simulate(spec3, n=2000, seed=82)
    fitted = fit_propensity_models(train, max(stages), seed=0)
    gaps = [_stage_logloss(fitted, held, m) - _stage_logloss(truth.propensity, held, m) for m in stages]

    data1, _ = simulate(ScenarioSpec(1, censor_rate=0.74, seed=83), n=2000, seed=83)
    fitted1 = fit_propensity_models(data1, max(stages), seed=0)
    devs = [
        float(np.max(np.abs(fitted1.probabilities(m, history_matrix(data1, m)[data1.stage_mask[:, m - 1]]) - 1 / 3)))
        for m in stages
    ]
    floor = [
        float(np.max(np.abs(np.bincount(data1.treatments[data1.stage_mask[:, m - 1], m - 1], minlength=4)[1:]
                            / data1.stage_mask[:, m - 1].sum() - 1 / 3)))
        for m in stages
    ]
    ok = max(gaps) <= 0.05 and max(devs) <= 0.05
    with capsys.disabled():
        print(f"\n[INFO] criterion 8, Example 1 empirical frequency max |f - 1/3| by stage {np.round(floor, 4).tolist()}")
    report(
        capsys,
        8,
        ok,
        f"Example 3 held-out log-loss excess by stage {np.round(gaps, 4).tolist()} (tol 0.05); "
        f"Example 1 max |p - 1/3| by stage {np.round(devs, 4).tolist()} (tol 0.05)",
    )
    assert ok


def test_criterion_09_policy_ordering(capsys):
    lines, ok = [], True
    for example, rate in ((1, 0.74), (2, 0.61)):
        spec = ScenarioSpec(example, censor_rate=rate, seed=90 + example)
        U = UniformPropensity(3)
        vals = {"truth": [], "random": [], "constant 1": [], "constant 2": [], "constant 3": []}
        for r in range(30):
            test, truth = simulate(spec, n=2000, seed=1000 * example + r)
            rng = np.random.default_rng(5000 + r)
            vals["truth"].append(evaluate_value(test, truth.rule if truth.policy is None else truth.policy, U, 1.4))
            vals["random"].append(evaluate_value(test, FixedRule(rng.integers(1, 4, size=(test.n, 5))), U, 1.4))
            for k in (1, 2, 3):
                vals[f"constant {k}"].append(evaluate_value(test, ConstantRule(k, 5), U, 1.4))
        means = {k: float(np.mean(v)) for k, v in vals.items()}
        ok &= all(means["truth"] > v for k, v in means.items() if k != "truth")
        lines.append(f"Example {example}: " + ", ".join(f"{k} {v:.3f}" for k, v in means.items()))
    report(capsys, 9, ok, "; ".join(lines))
    assert ok


def test_criterion_10_censoring_calibration(capsys):
    cases = [(1, 0.74), (2, 0.61), (2, 0.66), (3, 0.61), (3, 0.66), (4, 0.72)]
    errors = []
    for example, rate in cases:
        c0 = calibrate_c0(example, rate)
        errors.append(censoring_rate(example, c0, n=100_000, seed=31337 + example) - rate)
    worst = float(np.max(np.abs(errors)))
    ok = worst <= 0.005
    detail = ", ".join(f"Ex{e}@{r:.2f}: {r + d:.4f}" for (e, r), d in zip(cases, errors))
    report(capsys, 10, ok, f"fresh-draw rates {detail}; max error {worst:.4f} (tol 0.005)")
    assert ok
