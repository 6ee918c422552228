"""Inverse-probability-weighted Kaplan-Meier values of a treatment regime.

The value of a regime at ``t_g`` is a product over grid points ``t_s`` of
``1 - N_s / D_s`` where ``N_s`` sums weights of subjects failing at ``t_s``
and ``D_s`` sums weights of subjects still at risk.  A subject's weight at
``t_s`` only involves decisions up to stage ``m(t_{s-1})``, so subjects
censored early still contribute to the early factors.

Two weightings are supported: the hard one, an agreement indicator over
the inverse joint propensity, and the smooth one, which replaces each
stage's indicator by a logistic surrogate of the angle-based score.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, TimeGrid, build_time_grid, history_matrix
from .geometry import PolicySet, SimplexCode, stack_vertices
from .propensity import Propensity, joint_probabilities

__all__ = [
    "SurrogateParams",
    "HAZARD_FLOOR",
    "logistic",
    "logistic_derivative",
    "SurvivalProblem",
    "hard_weights",
    "smooth_weights",
    "km_value_hard",
    "km_value_smooth",
    "weighted_km",
]

log = logging.getLogger(__name__)

HAZARD_FLOOR = 1e-10


@dataclass(frozen=True)
class SurrogateParams:
    b: float
    u0: float = 0.0

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("surrogate steepness b must be positive")


def logistic(u, sp: SurrogateParams):
    z = sp.b * (np.asarray(u, dtype=float) - sp.u0)
    # 0.5 * (1 + tanh(z/2)) is the logistic without overflow for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_derivative(u, sp: SurrogateParams):
    lv = logistic(u, sp)
    return sp.b * lv * (1.0 - lv)


def _log_logistic(u, sp: SurrogateParams):
    """``log l(u)`` and ``d log l / du = b (1 - l(u))`` computed stably."""
    z = sp.b * (u - sp.u0)
    return -np.logaddexp(0.0, -z), sp.b * np.exp(-np.logaddexp(0.0, z))


def weighted_km(W: np.ndarray, events: np.ndarray, at_risk: np.ndarray):
    """Product-limit value from per-subject weights at each grid point.

    ``W``, ``events`` and ``at_risk`` are (n, g).  Returns ``(value, factors)``;
    a factor with an empty weighted risk set is 1.
    """
    numer = np.einsum("ij,ij->j", W, events)
    denom = np.einsum("ij,ij->j", W, at_risk)
    live = denom > 0
    factors = np.ones(W.shape[1])
    factors[live] = 1.0 - numer[live] / denom[live]
    factors = np.clip(factors, 0.0, 1.0)
    return float(np.prod(factors)), factors


class SurvivalProblem:
    """Arrays shared by every value evaluation on one (data, grid, propensity) triple.

    Parameters
    ----------
    data : Dataset
    grid : TimeGrid
    propensity : Propensity or ndarray
        A lookup, or a precomputed (n, S) array of joint propensities.
    """

    def __init__(self, data: Dataset, grid: TimeGrid, propensity, stages: int | None = None):
        self.data = data
        self.grid = grid
        # number of stage columns kept; value evaluation needs at least grid.m_g
        self.S = grid.m_g if stages is None else int(stages)
        if self.S > data.M:
            raise ValueError(f"stage {self.S} exceeds the {data.M} stages of the design")
        self.prev = np.minimum(grid.prev_stage, self.S) - 1  # 0-based stage column per grid point
        if isinstance(propensity, np.ndarray):
            P = np.asarray(propensity, dtype=float)
        else:
            P = joint_probabilities(propensity, data, self.S)
        if P.shape[1] < self.S:
            raise ValueError(f"propensities cover {P.shape[1]} stages, need {self.S}")
        self.P = P[:, : self.S]
        if np.any(self.P <= 0):
            raise ValueError("joint propensity must be positive")
        y = data.time[:, None]
        t = grid.points[None, :]
        self.at_risk = (y >= t).astype(float)
        self.events = ((y == t) & data.event[:, None]).astype(float)
        self.rows = [data.stage_mask[:, m] for m in range(self.S)]
        self.H = [history_matrix(data, m + 1)[self.rows[m]] for m in range(self.S)]
        # stage -> grid columns, for grouping per-factor gradients by stage
        self.stage_onehot = np.zeros((grid.g, self.S))
        self.stage_onehot[np.arange(grid.g), self.prev] = 1.0
        self._vertex_cache = {}

    def vertices_of_observed(self, code: SimplexCode, m: int) -> np.ndarray:
        key = (code.k, m)
        if key not in self._vertex_cache:
            self._vertex_cache[key] = stack_vertices(code, self.data.treatments[self.rows[m], m])
        return self._vertex_cache[key]

    def _check_policy(self, m_g: int) -> None:
        if m_g < self.S:
            raise ValueError(f"policy covers {m_g} stages but the grid needs {self.S}")

    # hard indicator path

    def hard_stage_weights(self, recommendations: np.ndarray) -> np.ndarray:
        """(n, S) weights ``w̄`` by stage: cumulative agreement over joint propensity."""
        self._check_policy(recommendations.shape[1])
        A = self.data.treatments[:, : self.S]
        agree = np.where(self.data.stage_mask[:, : self.S], A == recommendations[:, : self.S], True)
        return np.cumprod(agree, axis=1) / self.P

    def _check_value(self) -> None:
        if self.S < self.grid.m_g:
            raise ValueError(f"value at the target needs stages 1..{self.grid.m_g}")

    def hard_value(self, rule) -> float:
        self._check_value()
        W = self.hard_stage_weights(rule.recommend_all(self.data))
        value, *_ = weighted_km(W[:, self.prev], self.events, self.at_risk)
        return value

    # smooth surrogate path

    def stage_scores(self, policy: PolicySet, code: SimplexCode) -> list[np.ndarray]:
        """Per stage, ``<V_{A_i}, f_m(H_i)>`` for the subjects that entered it."""
        self._check_policy(policy.m_g)
        return [
            np.einsum(
                "ik,ik->i",
                self.vertices_of_observed(code, m),
                self.H[m] @ policy.coefs[m].T + policy.intercepts[m],
            )
            for m in range(self.S)
        ]

    def smooth_log_terms(self, policy: PolicySet, code: SimplexCode, sp: SurrogateParams):
        """``log w`` by stage (n, S) plus ``d log l / du`` per recorded subject-stage."""
        logl = np.zeros((self.data.n, self.S))
        dlogl = []
        for m, u in enumerate(self.stage_scores(policy, code)):
            lv, dl = _log_logistic(u, sp)
            logl[self.rows[m], m] = lv
            dlogl.append(dl)
        return np.cumsum(logl, axis=1) - np.log(self.P), dlogl

    def smooth_terms(self, policy: PolicySet, code: SimplexCode, sp: SurrogateParams):
        """Stage weights ``w`` (n, S) plus ``d log l / du`` per recorded subject-stage."""
        logW, dlogl = self.smooth_log_terms(policy, code, sp)
        return np.exp(logW), dlogl

    def grid_weights(self, logW: np.ndarray) -> np.ndarray:
        """(n, g) weights at each grid point, each column divided by its largest at-risk entry.

        Factors ``1 - N_s/D_s`` do not change under a per-column scale, and
        working from logs keeps saturated surrogates from underflowing.
        Subjects outside a risk set get weight 0.
        """
        L = np.where(self.at_risk > 0, logW[:, self.prev], -np.inf)
        top = L.max(axis=0)
        top = np.where(np.isfinite(top), top, 0.0)
        return np.exp(L - top)

    def smooth_value(self, policy: PolicySet, code: SimplexCode, sp: SurrogateParams):
        self._check_value()
        logW, _ = self.smooth_log_terms(policy, code, sp)
        value, factors = weighted_km(self.grid_weights(logW), self.events, self.at_risk)
        return value, factors


def _weight_stage(grid: TimeGrid, s: int) -> int:
    if not 0 <= s <= grid.g:
        raise ValueError(f"grid index {s} outside 0..{grid.g}")
    return 1 if s == 0 else int(grid.stage_of[s - 1])


def hard_weights(data: Dataset, rule, propensity, grid: TimeGrid, s: int) -> np.ndarray:
    """``w̄_i(s)`` for grid index ``s`` in ``0..g`` (``s = 0`` is ``t_0 = 0``, i.e. stage 1).

    Subjects that never entered stage ``m(t_s)`` get weight 0; they are
    outside every risk set the weight is used for.
    """
    stage = _weight_stage(grid, s)
    prob = SurvivalProblem(data, grid, propensity, stages=stage)
    W = prob.hard_stage_weights(rule.recommend_all(data))
    return np.where(data.n_stages >= stage, W[:, stage - 1], 0.0)


def smooth_weights(
    data: Dataset, policy: PolicySet, code: SimplexCode, sp: SurrogateParams, propensity, grid: TimeGrid, s: int
) -> np.ndarray:
    """``w_i(s)``: surrogate products over stages ``1..m(t_s)`` divided by the joint propensity."""
    stage = _weight_stage(grid, s)
    prob = SurvivalProblem(data, grid, propensity, stages=stage)
    W, _ = prob.smooth_terms(policy, code, sp)
    return np.where(data.n_stages >= stage, W[:, stage - 1], 0.0)


def km_value_hard(data: Dataset, rule, propensity, grid: TimeGrid | float) -> float:
    """Hard-indicator weighted KM survival at the grid's target time."""
    if not isinstance(grid, TimeGrid):
        grid = build_time_grid(data, grid)
    return SurvivalProblem(data, grid, propensity).hard_value(rule)


def km_value_smooth(data: Dataset, policy: PolicySet, code: SimplexCode, sp: SurrogateParams, propensity, grid):
    """Smooth-weight KM survival and its per-factor values ``1 - N_s/D_s``."""
    if not isinstance(grid, TimeGrid):
        grid = build_time_grid(data, grid)
    return SurvivalProblem(data, grid, propensity).smooth_value(policy, code, sp)
