"""Treatment-assignment probabilities: known designs and L1-penalized multinomial fits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import Dataset, Trajectory, history_matrix, history_vector

__all__ = [
    "PROPENSITY_FLOOR",
    "Propensity",
    "UniformPropensity",
    "KnownPropensity",
    "PropensityModel",
    "FittedPropensity",
    "softmax",
    "multinomial_loglik",
    "fit_propensity",
    "tune_lambda_star",
    "fit_propensity_models",
    "joint_propensity",
    "stage_probabilities",
    "joint_probabilities",
]

log = logging.getLogger(__name__)

PROPENSITY_FLOOR = 1e-6


def softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=-1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=-1, keepdims=True))


class Propensity:
    """Maps stage-``m`` histories to treatment probabilities, shape (rows, K)."""

    K: int

    def probabilities(self, m: int, H: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def max_stage(self) -> int | None:
        return None


@dataclass(frozen=True)
class UniformPropensity(Propensity):
    K: int

    def probabilities(self, m, H):
        H = np.atleast_2d(H)
        return np.full((H.shape[0], self.K), 1.0 / self.K)


@dataclass(frozen=True)
class KnownPropensity(Propensity):
    """Randomization probabilities given as a function ``(stage, H) -> (rows, K)``."""

    K: int
    fn: Callable[[int, np.ndarray], np.ndarray]

    def probabilities(self, m, H):
        return np.asarray(self.fn(m, np.atleast_2d(H)), dtype=float)


def stage_probabilities(lookup: Propensity, data: Dataset, max_stage: int | None = None) -> np.ndarray:
    """(n, S) probability of each subject's observed treatment; 1 where the stage was never entered."""
    S = data.M if max_stage is None else min(max_stage, data.M)
    out = np.ones((data.n, S))
    for m in range(1, S + 1):
        rows = data.stage_mask[:, m - 1]
        if not rows.any():
            continue
        P = lookup.probabilities(m, history_matrix(data, m)[rows])
        out[rows, m - 1] = P[np.arange(P.shape[0]), data.treatments[rows, m - 1] - 1]
    return out


def joint_probabilities(lookup: Propensity, data: Dataset, max_stage: int | None = None) -> np.ndarray:
    """(n, S) products ``prod_{j<=m} p(A_j | H_j)``, floored at ``PROPENSITY_FLOOR``."""
    return np.maximum(np.cumprod(stage_probabilities(lookup, data, max_stage), axis=1), PROPENSITY_FLOOR)


def joint_propensity(lookup: Propensity, traj: Trajectory, up_to_stage: int) -> float:
    if up_to_stage > len(traj.stages):
        raise ValueError(f"subject {traj.subject_id} has no stage {up_to_stage}")
    recs = sorted(traj.stages, key=lambda r: r.stage_index)
    prob = 1.0
    for m in range(1, up_to_stage + 1):
        P = lookup.probabilities(m, history_vector(traj, m)[None, :])
        prob *= float(P[0, recs[m - 1].treatment - 1])
    return max(prob, PROPENSITY_FLOOR)


# ---------------------------------------------------------------------------
# penalized multinomial logistic model


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """One stage's softmax model ``P(A = k | H) ∝ exp(intercept[k] + H @ coef[:, k])``."""

    stage: int
    intercept: np.ndarray  # (K,)
    coef: np.ndarray  # (p_m, K)
    lambda_star: float
    objective_trace: tuple = field(default=(), repr=False)

    @property
    def K(self) -> int:
        return len(self.intercept)

    def linear(self, H: np.ndarray) -> np.ndarray:
        return self.intercept + np.atleast_2d(H) @ self.coef

    def predict_proba(self, H: np.ndarray) -> np.ndarray:
        return softmax(self.linear(H))

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "lambda_star": self.lambda_star,
            "intercept": self.intercept.tolist(),
            "coef": self.coef.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PropensityModel":
        K = len(doc["intercept"])
        return cls(
            stage=int(doc["stage"]),
            intercept=np.array(doc["intercept"], dtype=float),
            coef=np.array(doc["coef"], dtype=float).reshape(-1, K),
            lambda_star=float(doc["lambda_star"]),
        )


@dataclass(frozen=True, eq=False)
class FittedPropensity(Propensity):
    models: dict  # stage -> PropensityModel

    @property
    def K(self) -> int:
        return next(iter(self.models.values())).K

    @property
    def max_stage(self) -> int:
        return max(self.models)

    def probabilities(self, m, H):
        if m not in self.models:
            raise ValueError(f"no propensity model fitted for stage {m}")
        return self.models[m].predict_proba(H)

    def to_dict(self) -> dict:
        return {"kind": "fitted", "stages": [self.models[m].to_dict() for m in sorted(self.models)]}

    @classmethod
    def from_dict(cls, doc: dict) -> "FittedPropensity":
        models = [PropensityModel.from_dict(s) for s in doc["stages"]]
        return cls({mod.stage: mod for mod in models})


def _stage_design(data: Dataset, stage: int) -> tuple[np.ndarray, np.ndarray]:
    rows = data.stage_mask[:, stage - 1]
    return history_matrix(data, stage)[rows], data.treatments[rows, stage - 1]


def multinomial_loglik(model: PropensityModel, data: Dataset, stage: int | None = None) -> float:
    """Average multinomial log-likelihood over subjects that entered ``stage``."""
    stage = model.stage if stage is None else stage
    H, A = _stage_design(data, stage)
    return _loglik(model.intercept, model.coef, H, A - 1)


def _loglik(b0, B, H, y) -> float:
    Z = b0 + H @ B
    return float(np.mean(_log_softmax(Z)[np.arange(len(y)), y]))


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _kkt_residual(gB, gb0, B, lam) -> float:
    nz = B != 0
    rB = np.where(nz, np.abs(gB + lam * np.sign(B)), np.maximum(np.abs(gB) - lam, 0.0))
    return float(max(np.max(np.abs(gb0)), np.max(rB) if rB.size else 0.0))


def _solve(H, y, K, lam, tol=1e-6, max_iter=5000, init=None):
    """Monotone FISTA with backtracking on the centred design.

    Returns ``(b0, B, trace, kkt)`` for the uncentred parameterisation; the
    L1 term leaves intercepts unpenalized, so centring is an exact
    reparameterisation.
    """
    N, d = H.shape
    mu = H.mean(axis=0)
    Hc = H - mu
    Y = np.zeros((N, K))
    Y[np.arange(N), y] = 1.0

    def f_and_grad(b0, B):
        Z = b0 + Hc @ B
        ls = _log_softmax(Z)
        f = -np.mean(ls[np.arange(N), y])
        G = (np.exp(ls) - Y) / N
        return f, G.sum(axis=0), Hc.T @ G

    def f_only(b0, B):
        return -np.mean(_log_softmax(b0 + Hc @ B)[np.arange(N), y])

    if init is None:
        counts = np.bincount(y, minlength=K).astype(float)
        b0 = np.log(np.maximum(counts, 0.5) / N)
        B = np.zeros((d, K))
    else:
        b0, B = init
        b0 = b0 + mu @ B  # to centred intercepts
    b0 = b0 - b0.mean()

    L = 1.0
    xb0, xB = b0, B
    yb0, yB = b0.copy(), B.copy()
    t = 1.0
    fx = f_only(xb0, xB)
    Fx = fx + lam * np.abs(xB).sum()
    trace = [Fx]
    kkt = np.inf
    for _ in range(max_iter):
        fy, gyb0, gyB = f_and_grad(yb0, yB)
        while True:
            zb0 = yb0 - gyb0 / L
            zB = _soft_threshold(yB - gyB / L, lam / L)
            db0, dB = zb0 - yb0, zB - yB
            fz = f_only(zb0, zB)
            quad = fy + gyb0 @ db0 + np.sum(gyB * dB) + 0.5 * L * (db0 @ db0 + np.sum(dB * dB))
            if fz <= quad + 1e-15 * abs(fy):
                break
            L *= 2.0
        Fz = fz + lam * np.abs(zB).sum()
        prev_b0, prev_B = xb0, xB
        if Fz <= Fx:
            xb0, xB, Fx = zb0, zB, Fz
        trace.append(Fx)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yb0 = xb0 + (t / t_next) * (zb0 - xb0) + ((t - 1.0) / t_next) * (xb0 - prev_b0)
        yB = xB + (t / t_next) * (zB - xB) + ((t - 1.0) / t_next) * (xB - prev_B)
        t = t_next
        L = max(L / 1.5, 1e-8)
        _, gxb0, gxB = f_and_grad(xb0, xB)
        kkt = _kkt_residual(gxB, gxb0, xB, lam)
        if kkt < tol:
            break
    b0 = xb0 - mu @ xB
    b0 = b0 - b0.mean()
    return b0, xB, tuple(trace), kkt


def _lambda_max(H, y, K) -> float:
    N = H.shape[0]
    freq = np.bincount(y, minlength=K) / N
    Y = np.zeros((N, K))
    Y[np.arange(N), y] = 1.0
    G = (H - H.mean(axis=0)).T @ (freq - Y) / N
    return float(np.max(np.abs(G))) if G.size else 0.0


def fit_propensity(data: Dataset, stage: int, lambda_star: float, tol: float = 1e-6, max_iter: int = 5000):
    """L1-penalized multinomial fit of ``A_m`` on ``H_m`` over subjects that entered ``stage``."""
    H, A = _stage_design(data, stage)
    if not np.all(np.isfinite(H)):
        raise ValueError("non-finite design values")
    counts = np.bincount(A - 1, minlength=data.K)
    if np.any(counts == 0):
        empty = [k + 1 for k in np.flatnonzero(counts == 0)]
        raise ValueError(f"stage {stage}: no observations for treatment arm(s) {empty}")
    b0, B, trace, kkt = _solve(H, A - 1, data.K, float(lambda_star), tol=tol, max_iter=max_iter)
    if kkt >= tol:
        log.warning("stage %d propensity fit stopped with KKT residual %.2e", stage, kkt)
    return PropensityModel(stage, b0, B, float(lambda_star), trace)


def tune_lambda_star(
    data: Dataset,
    stage: int,
    n_grid: int = 10,
    folds: int = 5,
    seed: int = 0,
    min_ratio: float = 1e-2,
    rule: str = "1se",
) -> tuple[float, np.ndarray, np.ndarray]:
    """Choose ``lambda_star`` by ``folds``-fold CV on held-out multinomial log-loss.

    The grid is logarithmic from the smallest value zeroing every coefficient
    down to ``min_ratio`` times it.  ``rule="min"`` takes the loss minimizer;
    ``"1se"`` takes the largest value whose loss is within one standard error
    of that minimum.  Returns ``(best, grid, mean_logloss)``.
    """
    if rule not in ("min", "1se"):
        raise ValueError("rule must be 'min' or '1se'")
    H, A = _stage_design(data, stage)
    y = A - 1
    K = data.K
    lam_max = _lambda_max(H, y, K)
    if lam_max <= 0:
        return 0.0, np.zeros(1), np.zeros(1)
    grid = lam_max * np.logspace(0, np.log10(min_ratio), n_grid)
    N = len(y)
    folds = min(folds, N)
    perm = np.random.default_rng(seed).permutation(N)
    parts = np.array_split(perm, folds)
    losses = np.zeros((len(parts), n_grid))
    used = np.ones(len(parts), dtype=bool)
    for r, val in enumerate(parts):
        train = np.setdiff1d(perm, val)
        if np.any(np.bincount(y[train], minlength=K) == 0) or len(val) == 0:
            used[r] = False
            continue
        init = None
        for j, lam in enumerate(grid):
            b0, B, _, _ = _solve(H[train], y[train], K, lam, init=init)
            init = (b0, B)
            losses[r, j] = -_loglik(b0, B, H[val], y[val])
    if not used.any():
        return float(grid[0]), grid, np.zeros(n_grid)
    mean = losses[used].mean(axis=0)
    best = int(np.argmin(mean))
    if rule == "1se" and used.sum() > 1:
        se = losses[used, best].std(ddof=1) / np.sqrt(used.sum())
        # grid is decreasing, so the first admissible index is the largest lambda
        best = int(np.flatnonzero(mean <= mean[best] + se)[0])
    return float(grid[best]), grid, mean


def fit_propensity_models(
    data: Dataset,
    max_stage: int,
    lambda_star: float | None = None,
    seed: int = 0,
) -> FittedPropensity:
    """Fit stages ``1..max_stage``; ``lambda_star=None`` tunes each stage by CV."""
    models = {}
    for m in range(1, max_stage + 1):
        if not data.stage_mask[:, m - 1].any():
            break
        lam = lambda_star
        if lam is None:
            lam, _, _ = tune_lambda_star(data, m, seed=seed + m)
        models[m] = fit_propensity(data, m, lam)
    return FittedPropensity(models)
