"""Simulation designs with multi-stage treatments and right censoring, plus the benchmark driver.

Four designs share ``K = 3`` treatments, ``p = 25`` covariates per stage and
``M = 5`` stages of width 0.5 starting at time 0.  A covariate label such as
``"15"`` names stage 1, coordinate 5 under the default ``"stage_coord"``
convention, or position 15 of the concatenated covariate vector under
``"flat"``.
"""
from __future__ import annotations

import functools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, build_time_grid, format_float, stage_index
from .estimator import km_value_hard
from .geometry import ConstantRule, FixedRule, PolicySet, build_simplex, recommend
from .optimizer import CalibrationError, FitConfig, fit_policy
from .propensity import Propensity, UniformPropensity, fit_propensity_models, softmax
from .tuning import TuningGrid, cross_validate

__all__ = [
    "ScenarioSpec",
    "GroundTruth",
    "Example3Propensity",
    "simulate",
    "calibrate_c0",
    "censoring_rate",
    "evaluate_value",
    "run_benchmark",
    "run_replication",
    "format_table",
    "DEFAULT_GRID",
    "BenchmarkReport",
    "true_policy",
]

log = logging.getLogger(__name__)

EXAMPLES = (1, 2, 3, 4)


@dataclass(frozen=True)
class ScenarioSpec:
    example_id: int
    n_train: int = 500
    n_test: int = 2000
    p: int = 25
    M: int = 5
    K: int = 3
    censor_rate: float = 0.74
    t_g: float = 1.4
    replications: int = 30
    seed: int = 0
    stage_width: float = 0.5
    index_convention: str = "stage_coord"
    c0: float | None = None

    def __post_init__(self):
        if self.example_id not in EXAMPLES:
            raise ValueError(f"unknown example {self.example_id}; expected one of {EXAMPLES}")
        if self.K != 3:
            raise ValueError("the simulation designs use exactly three treatments")
        if self.example_id > 1 and self.M > 5:
            raise ValueError("decision-rule coefficients are defined for at most 5 stages")
        if self.p < 5:
            raise ValueError("designs reference covariates up to coordinate 5")
        if self.index_convention not in ("stage_coord", "flat"):
            raise ValueError("index_convention must be 'stage_coord' or 'flat'")

    @property
    def stage_boundaries(self) -> tuple[float, ...]:
        return tuple(self.stage_width * m for m in range(self.M))

    @property
    def target_stage(self) -> int:
        return stage_index(self.t_g, self.stage_boundaries)

    def replace(self, **changes) -> "ScenarioSpec":
        doc = asdict(self)
        doc.update(changes)
        return ScenarioSpec(**doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioSpec":
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Latent quantities behind a simulated sample (all stages, ignoring truncation)."""

    decisions: np.ndarray  # (n, M) optimal treatments d_im
    survival_time: np.ndarray  # T
    censor_time: np.ndarray  # C
    c0: float
    treatments: np.ndarray  # (n, M) assigned treatments, all stages
    covariates: np.ndarray = field(default=None, repr=False)  # (n, M, p), all stages
    policy: PolicySet | None = None
    propensity: Propensity | None = field(default=None, repr=False)

    @property
    def rule(self) -> FixedRule:
        return FixedRule(self.decisions)

    def history(self, m: int) -> np.ndarray:
        """Full-sample ``H_m`` built from the latent covariates and treatments."""
        return _histories(self.covariates, self.treatments, m)

    def to_dict(self) -> dict:
        return {
            "c0": self.c0,
            "decisions": self.decisions.tolist(),
            "survival_time": [format_float(t) for t in self.survival_time],
            "censor_time": [format_float(t) for t in self.censor_time],
            "policy": None if self.policy is None else self.policy.to_dict(),
        }


# ---------------------------------------------------------------------------
# design constants


def _base_direction(example_id: int, p: int, j: int) -> np.ndarray:
    v = np.zeros(p)
    if example_id in (2, 3):
        v[:3] = (1.0, 1.0, 1.0) if j == 1 else (1.0, -1.0, -1.0)
    else:
        v[:3] = (-1.0, 0.5, -1.0) if j == 1 else (0.5, -1.0, -1.0)
    return v


# per stage: multipliers on the base direction for each stage's covariate
# block, then coefficients on the previous treatments
_RULE_BLOCKS = {
    2: [
        ((1.0,), ()),
        ((0.5, -1.5), (0.1,)),
        ((0.25, -0.5, 1.0), (0.05, 0.1)),
        ((0.1, -0.25, 0.5, 1.0), (0.01, -0.05, 0.1)),
        ((0.05, -0.1, 0.25, 0.5, 1.0), (0.01, -0.05, 0.05, -0.1)),
    ],
    4: [
        ((1.0,), ()),
        ((-0.5, 1.0), (-0.3,)),
        ((0.25, -0.25, 1.5), (-0.05, -0.1)),
        ((0.25, -0.25, -0.25, 1.0), (0.05, 0.05, -0.15)),
        ((0.05, -0.1, -0.25, -0.5, 1.0), (0.05, -0.05, 0.05, -0.1)),
    ],
}
_RULE_BLOCKS[3] = _RULE_BLOCKS[2]

_GAMMA = (np.array([0.0, 0.0, 0.25]), np.array([0.0, -0.25, 0.5]))


def rule_coefficients(example_id: int, p: int, M: int) -> list[np.ndarray]:
    """Per stage, the (2, m*p + m - 1) matrix whose rows give ``f_1m`` and ``f_2m`` linear parts."""
    blocks = _RULE_BLOCKS[example_id]
    out = []
    for m in range(M):
        mults, tail = blocks[m]
        rows = []
        for j in (1, 2):
            base = _base_direction(example_id, p, j)
            rows.append(np.concatenate([c * base for c in mults] + [np.array(tail, dtype=float)]))
        out.append(np.vstack(rows))
    return out


def true_policy(example_id: int, p: int = 25, M: int = 5) -> PolicySet:
    """The generating angle-based rule of Examples 2 and 3 as a policy."""
    if example_id not in (2, 3):
        raise ValueError("only Examples 2 and 3 use linear angle-based rules")
    coefs = rule_coefficients(example_id, p, M)
    return PolicySet(
        coefs=tuple(coefs),
        intercepts=tuple(np.zeros(2) for _ in range(M)),
        p=p,
        K=3,
        stage_boundaries=tuple(0.5 * m for m in range(M)),
    )


@dataclass(frozen=True)
class Example3Propensity(Propensity):
    """True assignment probabilities of Example 3 (treatment 3 is the reference)."""

    p: int = 25
    K: int = 3

    def linear(self, m: int, H: np.ndarray) -> np.ndarray:
        H = np.atleast_2d(H)
        Z = np.zeros((H.shape[0], 3))
        for k, g in enumerate(_GAMMA):
            gamma = np.zeros(self.p)
            gamma[: len(g)] = g
            coef = np.concatenate([np.tile(gamma, m), np.zeros(m - 1)])
            Z[:, k] = H @ coef
        return Z

    def probabilities(self, m, H):
        return softmax(self.linear(m, H))


def _covariate(X: np.ndarray, label: str, convention: str) -> np.ndarray:
    n, M, p = X.shape
    if convention == "stage_coord":
        stage, coord = int(label[0]), int(label[1:])
        return X[:, stage - 1, coord - 1]
    flat = X.reshape(n, M * p)
    return flat[:, int(label) - 1]


def _histories(X: np.ndarray, A: np.ndarray, m: int) -> np.ndarray:
    n, _, p = X.shape
    return np.concatenate([X[:, :m, :].reshape(n, m * p), A[:, : m - 1].astype(float)], axis=1)


def _draw(example_id: int, n: int, rng: np.random.Generator, p: int, M: int, convention: str):
    """Full latent sample: covariates, treatments, optimal decisions, log T and log C minus c0."""
    K = 3
    if example_id == 1:
        d = rng.integers(1, K + 1, size=(n, M))
        A = rng.integers(1, K + 1, size=(n, M))
        X = rng.normal(0.0, np.sqrt(0.1), size=(n, M, p))
        for m in range(M):
            X[np.arange(n), m, d[:, m] - 1] += 0.5 * (m + 1)
        eps = rng.normal(size=(4, n))
        log_t = (
            0.5 * np.sum(A == d, axis=1)
            - 3.0 * _covariate(X, "15", convention)
            + _covariate(X, "22", convention) ** 3
            - np.abs(_covariate(X, "33", convention))
            + eps[0]
        )
        log_c = 0.5 * eps[1] ** 2 - eps[1] + eps[2] - 2.0 * eps[3] ** 2
        return X, A, d, log_t, log_c

    if example_id in (2, 3):
        X = rng.normal(size=(n, M, p))
        A = np.zeros((n, M), dtype=int)
        d = np.zeros((n, M), dtype=int)
        coefs = rule_coefficients(example_id, p, M)
        code = build_simplex(K)
        prop = Example3Propensity(p) if example_id == 3 else None
        u = rng.random(size=(n, M))
        for m in range(1, M + 1):
            H = _histories(X, A, m)
            d[:, m - 1] = recommend(code, H @ coefs[m - 1].T)
            if prop is None:
                A[:, m - 1] = np.minimum((u[:, m - 1] * K).astype(int), K - 1) + 1
            else:
                cdf = np.cumsum(prop.probabilities(m, H), axis=1)
                A[:, m - 1] = np.minimum((u[:, m - 1, None] > cdf).sum(axis=1), K - 1) + 1
        eps = rng.normal(size=(4, n))
        log_t = (
            0.75 * np.sum(A == d, axis=1)
            - 0.5 * np.abs(_covariate(X, "15", convention))
            + _covariate(X, "12", convention)
            + eps[0]
        )
        log_c = 0.5 * eps[1] + eps[2] - eps[3]
        return X, A, d, log_t, log_c

    X = rng.random(size=(n, M, p))
    A = rng.integers(1, K + 1, size=(n, M))
    contaminated = rng.random(size=(n, M)) < 0.05
    U = rng.integers(1, K + 1, size=(n, M))
    coefs = rule_coefficients(4, p, M)
    d = np.zeros((n, M), dtype=int)
    for m in range(1, M + 1):
        f = (_histories(X, A, m) @ coefs[m - 1].T) ** 3
        d[:, m - 1] = 1 + (f[:, 0] > 0) + (f[:, 1] > 0)
    d = np.where(contaminated, U, d)
    eps1 = rng.normal(size=n)
    eps = rng.random(size=(3, n))
    log_t = (
        0.5 * np.sum(A == d, axis=1)
        - 2.0 * np.abs(_covariate(X, "13", convention))
        + _covariate(X, "15", convention)
        + eps1
    )
    log_c = 0.5 * np.abs(eps[0]) + eps[1] + eps[2]
    return X, A, d, log_t, log_c


def _known_propensity(spec: ScenarioSpec) -> Propensity:
    return Example3Propensity(spec.p) if spec.example_id == 3 else UniformPropensity(spec.K)


@functools.lru_cache(maxsize=64)
def calibrate_c0(
    example_id: int,
    target_rate: float,
    seed: int = 0,
    n_mc: int = 100_000,
    tol: float = 5e-4,
    p: int = 25,
    M: int = 5,
    index_convention: str = "stage_coord",
) -> float:
    """Shift ``c0`` of log censoring time so that ``P(C < T)`` hits ``target_rate``.

    Bisection on a fixed Monte-Carlo sample, so the estimated rate is
    monotone in ``c0``.
    """
    if not 0 < target_rate < 1:
        raise ValueError("target censoring rate must lie in (0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence([seed, example_id, 7919]))
    _, _, _, log_t, log_c = _draw(example_id, n_mc, rng, p, M, index_convention)

    def rate(c0):
        return float(np.mean(log_c + c0 < log_t))

    lo, hi = -50.0, 50.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        r = rate(mid)
        if abs(r - target_rate) <= tol:
            return mid
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    raise ValueError(f"censoring rate {target_rate} not attainable (last estimate {rate(0.5 * (lo + hi)):.4f})")


def censoring_rate(example_id: int, c0: float, n: int = 100_000, seed: int = 12345, **design) -> float:
    """Monte-Carlo ``P(C < T)`` on a fresh sample."""
    p, M = design.get("p", 25), design.get("M", 5)
    conv = design.get("index_convention", "stage_coord")
    rng = np.random.default_rng(seed)
    _, _, _, log_t, log_c = _draw(example_id, n, rng, p, M, conv)
    return float(np.mean(log_c + c0 < log_t))


def simulate(spec: ScenarioSpec, n: int | None = None, seed=None, c0: float | None = None):
    """Draw one observed sample and its latent truth.

    ``n`` defaults to ``spec.n_train`` and ``seed`` to ``spec.seed``.  ``c0``
    defaults to ``spec.c0``, else is calibrated to ``spec.censor_rate``.
    """
    n = spec.n_train if n is None else n
    seed = spec.seed if seed is None else seed
    if c0 is None:
        c0 = spec.c0
    if c0 is None:
        c0 = calibrate_c0(spec.example_id, spec.censor_rate, p=spec.p, M=spec.M, index_convention=spec.index_convention)
    rng = np.random.default_rng(seed)
    X, A, d, log_t, log_c = _draw(spec.example_id, n, rng, spec.p, spec.M, spec.index_convention)
    T = np.exp(log_t)
    C = np.exp(log_c + c0)
    Y = np.minimum(T, C)
    event = T <= C
    n_stages = stage_index(Y, spec.stage_boundaries)
    entered = np.arange(1, spec.M + 1)[None, :] <= n_stages[:, None]
    width = len(str(max(n - 1, 0)))
    data = Dataset(
        ids=np.array([f"s{i:0{width}d}" for i in range(n)], dtype=object),
        time=Y,
        event=event,
        covariates=np.where(entered[:, :, None], X, 0.0),
        treatments=np.where(entered, A, 0),
        K=spec.K,
        stage_boundaries=spec.stage_boundaries,
    )
    truth = GroundTruth(
        decisions=d,
        survival_time=T,
        censor_time=C,
        c0=float(c0),
        treatments=A,
        covariates=X,
        policy=true_policy(spec.example_id, spec.p, spec.M) if spec.example_id in (2, 3) else None,
        propensity=_known_propensity(spec),
    )
    return data, truth


def evaluate_value(test_data: Dataset, policy, propensity, t_g: float) -> float:
    """Hard-indicator weighted KM survival of ``policy`` at ``t_g`` on held-out data."""
    return km_value_hard(test_data, policy, propensity, build_time_grid(test_data, t_g))


# ---------------------------------------------------------------------------
# benchmark driver

DEFAULT_GRID = TuningGrid(b_values=(1.0, 5.0, 25.0), lambda_values=(0.01, 0.1, 1.0), d=5, seed=0)


@dataclass
class BenchmarkReport:
    """Held-out values per replication; nan marks a replication whose final fit could not be calibrated."""

    spec: ScenarioSpec
    values: list  # per replication, by replication index
    selected: list  # (b, lambda) per replication
    c0: float

    @property
    def completed(self) -> np.ndarray:
        v = np.asarray(self.values, dtype=float)
        return v[np.isfinite(v)]

    @property
    def failed(self) -> int:
        return len(self.values) - len(self.completed)

    @property
    def mean(self) -> float:
        v = self.completed
        return float(np.mean(v)) if len(v) else float("nan")

    @property
    def sd(self) -> float:
        v = self.completed
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    def row(self) -> dict:
        return {
            "example": self.spec.example_id,
            "stage": self.spec.target_stage,
            "t_g": self.spec.t_g,
            "censor_rate": self.spec.censor_rate,
            "replications": len(self.values),
            "failed": self.failed,
            "mean": self.mean,
            "sd": self.sd,
        }

    def to_csv(self) -> str:
        lines = ["replication,value,b,lambda"]
        for r, (v, (b, lam)) in enumerate(zip(self.values, self.selected)):
            value = format_float(v) if np.isfinite(v) else ""
            lines.append(f"{r},{value},{format_float(b)},{format_float(lam)}")
        return "\n".join(lines) + "\n"


def format_table(reports) -> str:
    """Aligned text table: one row per scenario with mean and SD of the held-out value."""
    header = ("Example", "Stage", "t_g", "Censoring", "Reps", "S(t_g) (SD)")
    rows = [
        (
            str(r.spec.example_id),
            str(r.spec.target_stage),
            f"{r.spec.t_g:g}",
            f"{100 * r.spec.censor_rate:.0f}%",
            str(len(r.values)) if not r.failed else f"{len(r.completed)}/{len(r.values)}",
            f"{r.mean:.3f}({r.sd:.3f})",
        )
        for r in reports
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    fmt = "  ".join("{:>%d}" % w for w in widths)
    out = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*row) for row in rows]
    return "\n".join(out) + "\n"


def _fitted_propensity_factory(seed: int):
    return functools.partial(_fit_props, seed=seed)


def _fit_props(data: Dataset, max_stage: int, *, seed: int):
    return fit_propensity_models(data, max_stage, seed=seed)


def run_replication(spec: ScenarioSpec, grid: TuningGrid, base: FitConfig, rep: int, c0: float):
    """One train/test draw, CV tuning, final fit and held-out evaluation."""
    ss = np.random.SeedSequence([spec.seed, rep])
    train_seed, test_seed, cv_seed, fit_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(4))
    train, _ = simulate(spec, spec.n_train, train_seed, c0)
    test, _ = simulate(spec, spec.n_test, test_seed, c0)
    stages = spec.target_stage
    if spec.example_id == 3:
        train_prop = _fitted_propensity_factory(fit_seed)
        test_prop = fit_propensity_models(test, stages, seed=fit_seed)
    else:
        train_prop = test_prop = _known_propensity(spec)
    config = base.replace(t_g=spec.t_g, seed=fit_seed)
    cv = cross_validate(train, TuningGrid(grid.b_values, grid.lambda_values, grid.d, cv_seed), config, train_prop, n_stages=stages)
    final_prop = train_prop if isinstance(train_prop, Propensity) else train_prop(train, stages)
    try:
        fit = fit_policy(train, config.replace(b=cv.b, lam=cv.lam), final_prop, n_stages=stages)
    except CalibrationError as exc:
        log.warning("replication %d left out: %s", rep, exc)
        return float("nan"), (cv.b, cv.lam)
    value = evaluate_value(test, fit.policy, test_prop, spec.t_g)
    return value, (cv.b, cv.lam)


def _run_rep_star(args):
    return run_replication(*args)


def run_benchmark(
    spec: ScenarioSpec,
    tuning_grid: TuningGrid = DEFAULT_GRID,
    base_config: FitConfig | None = None,
    threads: int = 1,
) -> BenchmarkReport:
    """Replicate simulate -> tune -> fit -> evaluate and summarize the held-out values."""
    c0 = spec.c0 if spec.c0 is not None else calibrate_c0(
        spec.example_id, spec.censor_rate, p=spec.p, M=spec.M, index_convention=spec.index_convention
    )
    base = base_config if base_config is not None else FitConfig(t_g=spec.t_g)
    jobs = [(spec, tuning_grid, base, r, c0) for r in range(spec.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_rep_star, jobs))
    else:
        results = [_run_rep_star(j) for j in jobs]
    return BenchmarkReport(spec, [v for v, _ in results], [s for _, s in results], c0)


def default_threads() -> int:
    env = os.environ.get("DTR_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def reference_policies(truth: GroundTruth, data: Dataset, rng: np.random.Generator, K: int = 3):
    """True rule, uniformly random rule and each constant rule, for sanity comparisons."""
    M = data.M
    out = {"truth": truth.policy if truth.policy is not None else truth.rule}
    out["random"] = FixedRule(rng.integers(1, K + 1, size=(data.n, M)))
    for k in range(1, K + 1):
        out[f"constant_{k}"] = ConstantRule(k, M)
    return out
