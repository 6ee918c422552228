"""Cross-validated choice of the surrogate steepness ``b`` and penalty ``lambda``."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, build_time_grid, format_float, stage_index
from .estimator import SurrogateParams, km_value_hard, km_value_smooth
from .optimizer import CalibrationError, FitConfig, fit_policy
from .propensity import Propensity

__all__ = ["TuningGrid", "CVResult", "kfold_split", "cross_validate"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TuningGrid:
    b_values: tuple[float, ...]
    lambda_values: tuple[float, ...]
    d: int = 5
    seed: int = 0

    def __post_init__(self):
        b = tuple(float(x) for x in self.b_values)
        lam = tuple(float(x) for x in self.lambda_values)
        if not b or not lam:
            raise ValueError("tuning grid must be non-empty")
        if min(b) <= 0 or min(lam) <= 0:
            raise ValueError("grid values must be positive")
        if self.d < 2:
            raise ValueError("need at least two folds")
        object.__setattr__(self, "b_values", b)
        object.__setattr__(self, "lambda_values", lam)

    def points(self):
        return [(b, lam) for b in self.b_values for lam in self.lambda_values]

    @classmethod
    def from_dict(cls, doc: dict) -> "TuningGrid":
        return cls(
            b_values=tuple(doc["b_values"]),
            lambda_values=tuple(doc["lambda_values"]),
            d=int(doc.get("d", 5)),
            seed=int(doc.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {"b_values": list(self.b_values), "lambda_values": list(self.lambda_values), "d": self.d, "seed": self.seed}


def kfold_split(n: int, d: int, seed: int) -> list[np.ndarray]:
    """Random partition of ``range(n)`` into ``d`` folds whose sizes differ by at most one."""
    if d < 2:
        raise ValueError("need at least two folds")
    if n < d:
        raise ValueError(f"cannot split {n} subjects into {d} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, d)]


@dataclass
class CVResult:
    b: float
    lam: float
    scores: dict  # (b, lam) -> per-fold scores, nan where skipped
    skipped: dict  # (b, lam) -> per-fold skip flags

    def mean_score(self, b: float, lam: float) -> float:
        s = np.asarray(self.scores[(b, lam)])
        ok = ~np.asarray(self.skipped[(b, lam)])
        return float(np.mean(s[ok])) if ok.any() else float("nan")

    @property
    def best_score(self) -> float:
        return self.mean_score(self.b, self.lam)

    def table(self):
        rows = []
        for (b, lam), scores in self.scores.items():
            for r, (s, skip) in enumerate(zip(scores, self.skipped[(b, lam)])):
                rows.append((b, lam, r, s, bool(skip)))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("b,lambda,fold,score,skipped\n")
        for b, lam, r, s, skip in self.table():
            score = "" if skip else format_float(s)
            buf.write(f"{format_float(b)},{format_float(lam)},{r},{score},{int(skip)}\n")
        return buf.getvalue()


def _resolve(propensity, data: Dataset, n_stages: int) -> Propensity:
    if isinstance(propensity, Propensity):
        return propensity
    return propensity(data, n_stages)


def cross_validate(
    data: Dataset,
    grid: TuningGrid,
    base_config: FitConfig,
    propensity,
    n_stages: int | None = None,
    score: str = "hard",
) -> CVResult:
    """Pick ``(b, lambda)`` maximizing the average validation-fold survival at ``t_g``.

    Parameters
    ----------
    propensity : Propensity or callable
        A known lookup, or ``factory(train_data, n_stages)`` fitted afresh on
        each training fold and then applied to that fold's validation subjects.
    n_stages : int, optional
        Stages each fitted policy covers; defaults to the stage containing
        ``t_g`` so every validation grid is covered.
    score : {"hard", "smooth"}
        Validation estimator.  The smooth one uses the fitted ``b`` and ``u0``.

    Folds with no events before ``t_g`` in the training part, or whose
    ``u0`` calibration fails, are flagged and left out of the averages.
    Ties in average score go to the larger ``lambda``, then the smaller ``b``.
    """
    if score not in ("hard", "smooth"):
        raise ValueError("score must be 'hard' or 'smooth'")
    if grid.d > data.n:
        raise ValueError(f"cannot split {data.n} subjects into {grid.d} folds")
    if n_stages is None:
        n_stages = stage_index(base_config.t_g, data.stage_boundaries)
    # folds are assigned on the id-sorted order so row order does not matter
    order = np.argsort(np.asarray(data.ids, dtype=str), kind="stable")
    folds = [np.sort(order[f]) for f in kfold_split(data.n, grid.d, grid.seed)]

    points = grid.points()
    scores = {pt: [np.nan] * grid.d for pt in points}
    skipped = {pt: [True] * grid.d for pt in points}
    for r, val_idx in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(data.n), val_idx)
        train, val = data.subset(train_idx), data.subset(val_idx)
        if not np.any(train.event & (train.time < base_config.t_g)):
            log.info("fold %d skipped: no training events before t_g", r)
            continue
        try:
            prop = _resolve(propensity, train, n_stages)
        except ValueError as exc:
            log.info("fold %d skipped: propensity fit failed (%s)", r, exc)
            continue
        val_grid = build_time_grid(val, base_config.t_g)
        for b, lam in points:
            config = base_config.replace(b=b, lam=lam)
            try:
                fit = fit_policy(train, config, prop, n_stages=max(n_stages, val_grid.m_g))
            except CalibrationError as exc:
                log.info("fold %d, b=%g, lambda=%g skipped: %s", r, b, lam, exc)
                continue
            if score == "hard":
                value = km_value_hard(val, fit.policy, prop, val_grid)
            else:
                value, _ = km_value_smooth(val, fit.policy, fit.policy.code, SurrogateParams(b, fit.u0), prop, val_grid)
            scores[(b, lam)][r] = value
            skipped[(b, lam)][r] = False

    best, best_key = None, None
    for b, lam in points:
        ok = ~np.asarray(skipped[(b, lam)])
        if not ok.any():
            continue
        mean = float(np.mean(np.asarray(scores[(b, lam)])[ok]))
        key = (mean, lam, -b)
        if best_key is None or key > best_key:
            best, best_key = (b, lam), key
    if best is None:
        raise ValueError("every fold was skipped for every grid point")
    return CVResult(best[0], best[1], scores, skipped)
