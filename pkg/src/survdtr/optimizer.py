"""Penalized smooth-survival objective and Barzilai-Borwein gradient ascent."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .dataset import Dataset, TimeGrid, build_time_grid
from .estimator import HAZARD_FLOOR, SurrogateParams, SurvivalProblem
from .geometry import PolicySet, SimplexCode, build_simplex

__all__ = [
    "FitConfig",
    "FitResult",
    "CalibrationError",
    "compute_cq",
    "inflection_point",
    "PenalizedObjective",
    "objective",
    "gradient",
    "bb_ascent",
    "fit_policy",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    t_g: float
    lam: float = 0.1
    b: float = 5.0
    cbar: float = 0.5
    max_iter: int = 300
    epsilon: float = 1e-4
    eta0: float = 1e-2
    step_bounds: tuple[float, float] = (1e-6, 1e2)
    seed: int = 0
    n_starts: int = 5
    init_scale: float = 0.1

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if not self.b > 0:
            raise ValueError("b must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.cbar <= 0.5:
            raise ValueError("cbar must lie in (0, 1/2]")
        lo, hi = self.step_bounds
        if not 0 < lo <= hi:
            raise ValueError("step bounds must satisfy 0 < min <= max")
        if self.max_iter < 1 or self.n_starts < 1:
            raise ValueError("max_iter and n_starts must be at least 1")
        object.__setattr__(self, "step_bounds", (float(lo), float(hi)))

    def replace(self, **changes) -> "FitConfig":
        doc = asdict(self)
        doc.update(changes)
        return FitConfig(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["step_bounds"] = list(self.step_bounds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "FitConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown fit configuration keys: {sorted(unknown)}")
        if "step_bounds" in doc:
            doc["step_bounds"] = tuple(doc["step_bounds"])
        return cls(**doc)


@dataclass
class FitResult:
    policy: PolicySet
    objective_trace: list
    converged: bool
    iterations: int
    u0: float
    objective: float = float("nan")
    cq: float = float("nan")
    theta: np.ndarray = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "objective": self.objective,
            "objective_trace": list(self.objective_trace),
            "converged": self.converged,
            "iterations": self.iterations,
            "u0": self.u0,
            "cq": self.cq,
        }


class CalibrationError(ValueError):
    def __init__(self, s: int, value: float):
        super().__init__(
            f"C_Q log argument {value:.4g} <= 0 at grid point {s}: "
            "weighted hazard exceeds what cbar allows"
        )
        self.s = s


def compute_cq(data: Dataset, grid: TimeGrid, propensity, cbar: float = 0.5) -> float:
    """Empirical ``sum_s log(1 - N_s / (cbar * D_s))`` under pure inverse-propensity weights."""
    if not 0 < cbar <= 0.5:
        raise ValueError("cbar must lie in (0, 1/2]")
    prob = propensity if isinstance(propensity, SurvivalProblem) else SurvivalProblem(data, grid, propensity)
    W = 1.0 / prob.P[:, prob.prev]
    numer = np.mean(W * prob.events, axis=0)
    denom = np.mean(W * prob.at_risk, axis=0)
    total = 0.0
    for s in range(grid.g):
        if denom[s] <= 0:
            continue
        arg = 1.0 - numer[s] / (cbar * denom[s])
        if arg <= 0:
            raise CalibrationError(s + 1, arg)
        total += np.log(arg)
    return float(total)


def inflection_point(cq: float, lam: float) -> float:
    return -abs(cq) / lam


class PenalizedObjective:
    """``Q(theta) = sum_s log(1 - N_s/D_s) - lam * ||theta||_2`` with surrogate weights.

    Each factor is floored at ``HAZARD_FLOOR`` before the log; floored and
    empty-risk-set factors contribute no gradient.
    """

    def __init__(self, problem: SurvivalProblem, template: PolicySet, sp: SurrogateParams, lam: float):
        self.problem = problem
        self.template = template
        self.code = build_simplex(template.K)
        self.sp = sp
        self.lam = float(lam)
        if template.m_g < problem.S:
            raise ValueError(f"policy needs at least {problem.S} stages")

    def log_survival(self, theta) -> float:
        policy = self.template.with_vector(theta)
        _, factors = self.problem.smooth_value(policy, self.code, self.sp)
        return float(np.sum(np.log(np.maximum(factors, HAZARD_FLOOR))))

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return self.log_survival(theta) - self.lam * float(np.linalg.norm(theta))

    def value_and_grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        prob = self.problem
        policy = self.template.with_vector(theta)
        logW, dlogl = prob.smooth_log_terms(policy, self.code, self.sp)
        Ws = prob.grid_weights(logW)
        numer = np.einsum("ij,ij->j", Ws, prob.events)
        denom = np.einsum("ij,ij->j", Ws, prob.at_risk)
        live = denom > 0
        factors = np.ones(prob.grid.g)
        factors[live] = 1.0 - numer[live] / denom[live]
        active = live & (factors > HAZARD_FLOOR)
        if np.any(live & ~active):
            log.debug("%d hazard factors floored", int(np.sum(live & ~active)))
        value = float(np.sum(np.log(np.maximum(factors, HAZARD_FLOOR))))

        # d log(1 - N/D) / d w_i = (r_i - e_i)/(D - N) - r_i/D, per grid point
        c_risk = np.zeros(prob.grid.g)
        c_event = np.zeros(prob.grid.g)
        surv = denom[active] - numer[active]
        c_event[active] = 1.0 / surv
        c_risk[active] = 1.0 / surv - 1.0 / denom[active]
        a = prob.at_risk * c_risk - prob.events * c_event
        # group grid points by the stage their weight reaches, then accumulate
        # over later stages: log w at stage m contains log l_j for all j <= m
        per_stage = (Ws * a) @ prob.stage_onehot
        through = np.cumsum(per_stage[:, ::-1], axis=1)[:, ::-1]

        grad_blocks = []
        for m in range(policy.m_g):
            K1 = policy.K - 1
            if m < prob.S:
                coef = through[prob.rows[m], m] * dlogl[m]
                VA = prob.vertices_of_observed(self.code, m) * coef[:, None]
                grad_blocks.append((VA.T @ prob.H[m]).ravel())
                grad_blocks.append(VA.sum(axis=0))
            else:
                grad_blocks.append(np.zeros(policy.coefs[m].size))
                grad_blocks.append(np.zeros(K1))
        grad = np.concatenate(grad_blocks)

        norm = float(np.linalg.norm(theta))
        if norm > 0:
            grad = grad - self.lam * theta / norm
        return value - self.lam * norm, grad


def objective(theta, data, grid, code, config: FitConfig, propensity, template: PolicySet, u0: float) -> float:
    prob = SurvivalProblem(data, grid, propensity)
    return PenalizedObjective(prob, template, SurrogateParams(config.b, u0), config.lam)(theta)


def gradient(theta, data, grid, code, config: FitConfig, propensity, template: PolicySet, u0: float) -> np.ndarray:
    prob = SurvivalProblem(data, grid, propensity)
    return PenalizedObjective(prob, template, SurrogateParams(config.b, u0), config.lam).value_and_grad(theta)[1]


def bb_ascent(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    init_theta,
    config: FitConfig,
):
    """Maximize ``fun`` (returning value and gradient) by Barzilai-Borwein steps.

    Returns ``(best_theta, best_value, trace, converged, iterations)``.  The
    step is ``-(dtheta . dgrad) / ||dgrad||^2``, positive under concavity;
    non-positive or non-finite ratios fall back to ``eta0``, and every step is
    clipped to ``step_bounds``.
    """
    theta = np.array(init_theta, dtype=float)
    value, grad = fun(theta)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise ValueError("objective is not finite at the initial point")
    lo, hi = config.step_bounds
    eta = float(np.clip(config.eta0, lo, hi))
    trace = [value]
    best_theta, best_value = theta.copy(), value
    converged = False
    iterations = 0
    for _ in range(config.max_iter):
        iterations += 1
        new_theta = theta + eta * grad
        new_value, new_grad = fun(new_theta)
        while not (np.isfinite(new_value) and np.all(np.isfinite(new_grad))) and eta > lo:
            eta = max(eta * 0.1, lo)
            new_theta = theta + eta * grad
            new_value, new_grad = fun(new_theta)
        if not np.isfinite(new_value):
            log.warning("non-finite objective; stopping at iteration %d", iterations)
            break
        trace.append(new_value)
        if new_value > best_value:
            best_theta, best_value = new_theta.copy(), new_value
        step = new_theta - theta
        dgrad = new_grad - grad
        ss = float(step @ step)
        yy = float(dgrad @ dgrad)
        if max(ss, yy) < config.epsilon:
            converged = True
            theta, grad = new_theta, new_grad
            break
        ratio = -float(step @ dgrad) / yy if yy > 0 else np.nan
        eta = ratio if np.isfinite(ratio) and ratio > 0 else config.eta0
        eta = float(np.clip(eta, lo, hi))
        theta, grad = new_theta, new_grad
    return best_theta, best_value, trace, converged, iterations


def fit_policy(
    data: Dataset,
    config: FitConfig,
    propensity,
    n_stages: int | None = None,
    grid: TimeGrid | None = None,
    init_theta=None,
) -> FitResult:
    """Learn linear angle-based decision rules maximizing the penalized smooth survival at ``t_g``.

    ``n_stages`` defaults to ``m(t_{g-1})`` of the training grid; pass a
    larger value so the policy also covers stages a different evaluation grid
    may need.  Runs ``config.n_starts`` ascents from uniform random starts
    (plus ``init_theta`` when given) and keeps the best.
    """
    grid = build_time_grid(data, config.t_g) if grid is None else grid
    prob = SurvivalProblem(data, grid, propensity)
    cq = compute_cq(data, grid, prob, config.cbar)
    u0 = inflection_point(cq, config.lam)
    m_g = grid.m_g if n_stages is None else max(int(n_stages), grid.m_g)
    template = PolicySet.zeros(data.p, data.K, m_g, data.stage_boundaries)
    obj = PenalizedObjective(prob, template, SurrogateParams(config.b, u0), config.lam)

    starts = []
    if init_theta is not None:
        starts.append(np.asarray(init_theta, dtype=float))
    for ss in np.random.SeedSequence(config.seed).spawn(config.n_starts):
        rng = np.random.default_rng(ss)
        starts.append(rng.uniform(-config.init_scale, config.init_scale, template.n_params))

    best = None
    for theta0 in starts:
        theta, value, trace, converged, iters = bb_ascent(obj.value_and_grad, theta0, config)
        if best is None or value > best[1]:
            best = (theta, value, trace, converged, iters)
    theta, value, trace, converged, iters = best
    return FitResult(
        policy=template.with_vector(theta),
        objective_trace=trace,
        converged=converged,
        iterations=iters,
        u0=u0,
        objective=value,
        cq=cq,
        theta=theta,
    )
