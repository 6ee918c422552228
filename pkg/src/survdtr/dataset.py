"""Longitudinal right-censored data: trajectories, CSV I/O, histories and time grids.

A subject enters stage ``m`` when its observed time reaches the stage start
``stage_boundaries[m - 1]``; covariates and treatment for a stage exist only
for the stages a subject actually entered.  Stage indices are 1-based
everywhere in the public API.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "StageRecord",
    "Trajectory",
    "Dataset",
    "TimeGrid",
    "DataError",
    "stage_index",
    "history_dim",
    "history_vector",
    "history_matrix",
    "build_time_grid",
    "load_long_csv",
    "write_long_csv",
    "load_dir",
    "format_float",
]


class DataError(ValueError):
    """Malformed or inconsistent longitudinal data."""


def format_float(x: float) -> str:
    return "%.17g" % x


def stage_index(t, stage_boundaries: Sequence[float]):
    """1-based stage containing time ``t``; times past the last start stay in the last stage."""
    b = np.asarray(stage_boundaries, dtype=float)
    idx = np.searchsorted(b, np.asarray(t, dtype=float), side="right")
    idx = np.clip(idx, 1, len(b))
    if np.ndim(idx) == 0:
        return int(idx)
    return idx.astype(int)


def history_dim(m: int, p: int) -> int:
    return m * p + (m - 1)


@dataclass(frozen=True)
class StageRecord:
    stage_index: int
    covariates: tuple[float, ...]
    treatment: int


@dataclass(frozen=True)
class Trajectory:
    subject_id: str
    observed_time: float
    event: bool
    stages: tuple[StageRecord, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Array-backed sample of ``n`` trajectories over ``M`` potential stages.

    Parameters
    ----------
    ids : array of str, shape (n,)
    time : array of float, shape (n,)
        Observed time ``min(T, C)``.
    event : array of bool, shape (n,)
        True when the failure was observed.
    covariates : array of float, shape (n, M, p)
        Zero-filled for stages a subject never entered.
    treatments : array of int, shape (n, M)
        Labels in ``1..K``; 0 for stages a subject never entered.
    K : int
    stage_boundaries : tuple of float
        Stage start times, strictly increasing from 0.
    """

    ids: np.ndarray
    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    treatments: np.ndarray
    K: int
    stage_boundaries: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=object))
        object.__setattr__(self, "time", np.asarray(self.time, dtype=float))
        object.__setattr__(self, "event", np.asarray(self.event, dtype=bool))
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float))
        object.__setattr__(self, "treatments", np.asarray(self.treatments, dtype=int))
        object.__setattr__(self, "stage_boundaries", tuple(float(b) for b in self.stage_boundaries))
        for arr in (self.ids, self.time, self.event, self.covariates, self.treatments):
            arr.setflags(write=False)
        self._validate()

    def _validate(self):
        b = np.asarray(self.stage_boundaries)
        if len(b) == 0 or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise DataError("stage_boundaries must start at 0 and be strictly increasing")
        n = len(self.ids)
        M = len(b)
        if self.covariates.ndim != 3 or self.covariates.shape[:2] != (n, M):
            raise DataError(f"covariates must have shape (n, {M}, p), got {self.covariates.shape}")
        if self.treatments.shape != (n, M) or self.time.shape != (n,) or self.event.shape != (n,):
            raise DataError("inconsistent array shapes")
        if self.K < 2:
            raise DataError("K must be at least 2")
        if len(set(self.ids.tolist())) != n:
            raise DataError("duplicate subject ids")
        if np.any(~np.isfinite(self.time)) or np.any(self.time < 0):
            raise DataError("observed times must be finite and nonnegative")
        if not np.all(np.isfinite(self.covariates)):
            raise DataError("covariates must be finite")
        mask = self.stage_mask
        A = self.treatments
        if np.any(mask & ((A < 1) | (A > self.K))):
            raise DataError(f"treatment outside 1..{self.K}")
        if np.any(~mask & (A != 0)):
            raise DataError("treatment recorded after a subject's exit stage")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.covariates.shape[2]

    @property
    def M(self) -> int:
        return len(self.stage_boundaries)

    @cached_property
    def n_stages(self) -> np.ndarray:
        """Number of recorded stages per subject, ``m(Y_i)``."""
        return stage_index(self.time, self.stage_boundaries)

    @cached_property
    def stage_mask(self) -> np.ndarray:
        """Boolean (n, M): True where subject i entered stage m."""
        return np.arange(1, self.M + 1)[None, :] <= self.n_stages[:, None]

    def history(self, m: int) -> np.ndarray:
        return history_matrix(self, m)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            ids=self.ids[index],
            time=self.time[index],
            event=self.event[index],
            covariates=self.covariates[index],
            treatments=self.treatments[index],
            K=self.K,
            stage_boundaries=self.stage_boundaries,
        )

    @property
    def trajectories(self) -> tuple[Trajectory, ...]:
        out = []
        for i in range(self.n):
            stages = tuple(
                StageRecord(m + 1, tuple(float(x) for x in self.covariates[i, m]), int(self.treatments[i, m]))
                for m in range(int(self.n_stages[i]))
            )
            out.append(Trajectory(str(self.ids[i]), float(self.time[i]), bool(self.event[i]), stages))
        return tuple(out)

    @classmethod
    def from_trajectories(
        cls,
        trajectories: Iterable[Trajectory],
        K: int,
        stage_boundaries: Sequence[float],
        p: int | None = None,
    ) -> "Dataset":
        trajectories = list(trajectories)
        M = len(stage_boundaries)
        if p is None:
            if not trajectories or not trajectories[0].stages:
                raise DataError("cannot infer covariate dimension")
            p = len(trajectories[0].stages[0].covariates)
        n = len(trajectories)
        X = np.zeros((n, M, p))
        A = np.zeros((n, M), dtype=int)
        for i, tr in enumerate(trajectories):
            _check_trajectory(tr, p, K, stage_boundaries)
            for rec in tr.stages:
                X[i, rec.stage_index - 1] = rec.covariates
                A[i, rec.stage_index - 1] = rec.treatment
        return cls(
            ids=np.array([tr.subject_id for tr in trajectories], dtype=object),
            time=np.array([tr.observed_time for tr in trajectories], dtype=float),
            event=np.array([tr.event for tr in trajectories], dtype=bool),
            covariates=X,
            treatments=A,
            K=K,
            stage_boundaries=tuple(stage_boundaries),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.K == other.K
            and self.stage_boundaries == other.stage_boundaries
            and self.covariates.shape == other.covariates.shape
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.event, other.event)
            and np.array_equal(self.covariates, other.covariates)
            and np.array_equal(self.treatments, other.treatments)
        )

    __hash__ = None


def _check_trajectory(tr: Trajectory, p: int, K: int, stage_boundaries) -> None:
    if not tr.stages:
        raise DataError(f"subject {tr.subject_id}: no stage records")
    exit_stage = stage_index(tr.observed_time, stage_boundaries)
    seen = [rec.stage_index for rec in tr.stages]
    for m in range(1, exit_stage + 1):
        if m not in seen:
            raise DataError(f"subject {tr.subject_id}: missing stage {m}")
    for rec in tr.stages:
        if rec.stage_index > exit_stage:
            raise DataError(
                f"subject {tr.subject_id}: stage {rec.stage_index} recorded after exit stage {exit_stage}"
            )
        if len(rec.covariates) != p:
            raise DataError(f"subject {tr.subject_id}: expected {p} covariates, got {len(rec.covariates)}")
        if not 1 <= rec.treatment <= K:
            raise DataError(f"subject {tr.subject_id}: treatment {rec.treatment} outside 1..{K}")


# ---------------------------------------------------------------------------
# histories


def history_vector(traj: Trajectory, m: int) -> np.ndarray:
    """``H_m = (X_1, ..., X_m, A_1, ..., A_{m-1})`` for one trajectory."""
    if m < 1 or m > len(traj.stages):
        raise DataError(f"stage {m} not recorded for subject {traj.subject_id}")
    recs = sorted(traj.stages, key=lambda r: r.stage_index)[:m]
    xs = [x for r in recs for x in r.covariates]
    acts = [float(r.treatment) for r in recs[: m - 1]]
    return np.array(xs + acts, dtype=float)


def history_matrix(data: Dataset, m: int) -> np.ndarray:
    """Stacked ``H_m`` rows, shape (n, m*p + m - 1); rows of subjects that never entered stage m are zero."""
    if m < 1 or m > data.M:
        raise DataError(f"stage {m} outside 1..{data.M}")
    n, p = data.n, data.p
    X = data.covariates[:, :m, :].reshape(n, m * p)
    A = data.treatments[:, : m - 1].astype(float)
    H = np.concatenate([X, A], axis=1)
    H[~data.stage_mask[:, m - 1]] = 0.0
    return H


# ---------------------------------------------------------------------------
# time grid


@dataclass(frozen=True)
class TimeGrid:
    """Grid ``t_1 < ... < t_g`` with ``t_0 = 0`` implicit.

    ``stage_of[s - 1]`` is ``m(t_s)``; ``prev_stage[s - 1]`` is ``m(t_{s-1})``,
    the last stage whose treatment can affect the hazard at ``t_s``.
    """

    points: np.ndarray
    stage_of: np.ndarray
    stage_boundaries: tuple[float, ...]

    @property
    def t_g(self) -> float:
        return float(self.points[-1])

    @property
    def g(self) -> int:
        return len(self.points)

    @property
    def prev_stage(self) -> np.ndarray:
        return np.concatenate([[1], self.stage_of[:-1]]).astype(int)

    @property
    def m_g(self) -> int:
        """``m(t_{g-1})``: number of stages whose decisions affect survival at ``t_g``."""
        return int(self.prev_stage[-1])


def build_time_grid(data: Dataset, t_g: float) -> TimeGrid:
    t_g = float(t_g)
    if not t_g > 0:
        raise DataError("target time must be positive")
    b = data.stage_boundaries
    if len(b) > 1:
        limit = b[-1] + (b[-1] - b[-2])
        if t_g > limit:
            raise DataError(f"target time {t_g} beyond the last stage (ends at {limit})")
    ev = np.unique(data.time[data.event & (data.time < t_g)])
    points = np.append(ev, t_g)
    return TimeGrid(points=points, stage_of=stage_index(points, b), stage_boundaries=b)


# ---------------------------------------------------------------------------
# CSV I/O

SUBJECTS_FILE = "subjects.csv"
STAGES_FILE = "stages.csv"
DESIGN_FILE = "design.json"


def load_long_csv(
    subjects_path,
    stages_path,
    stage_boundaries: Sequence[float],
    K: int | None = None,
) -> Dataset:
    """Read the two-file long format.

    ``subjects_path`` has columns ``id,time,event``; ``stages_path`` has
    ``id,stage,treatment,x1..xp``.  Row order is irrelevant.  When ``K`` is
    omitted it is taken as the largest treatment label present.
    """
    subjects = {}
    with open(subjects_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, ["id", "time", "event"], subjects_path)
        for row in reader:
            sid = row["id"]
            if sid in subjects:
                raise DataError(f"duplicate subject id {sid}")
            time = _parse_float(row["time"], f"time of subject {sid}")
            event = _parse_int(row["event"], f"event of subject {sid}")
            if event not in (0, 1):
                raise DataError(f"event of subject {sid} must be 0 or 1")
            subjects[sid] = (time, bool(event))

    records: dict[str, dict[int, StageRecord]] = {sid: {} for sid in subjects}
    max_label = 0
    with open(stages_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        _require_columns(header, ["id", "stage", "treatment"], stages_path)
        xcols = [c for c in header[3:]]
        if not xcols or xcols != [f"x{j}" for j in range(1, len(xcols) + 1)]:
            raise DataError(f"{stages_path}: covariate columns must be x1..xp")
        p = len(xcols)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 + p:
                raise DataError(f"{stages_path}:{lineno}: expected {3 + p} fields")
            sid = row[0]
            if sid not in subjects:
                raise DataError(f"{stages_path}:{lineno}: unknown subject {sid}")
            m = _parse_int(row[1], f"stage at line {lineno}")
            a = _parse_int(row[2], f"treatment at line {lineno}")
            xs = tuple(_parse_float(v, f"covariate at line {lineno}") for v in row[3:])
            if m in records[sid]:
                raise DataError(f"duplicate (id, stage) pair ({sid}, {m})")
            if m < 1:
                raise DataError(f"stage index must be positive at line {lineno}")
            records[sid][m] = StageRecord(m, xs, a)
            max_label = max(max_label, a)

    K = max_label if K is None else K
    for sid, recs in records.items():
        for rec in recs.values():
            if not 1 <= rec.treatment <= K:
                raise DataError(f"subject {sid}: treatment {rec.treatment} outside 1..{K}")
    trajs = [
        Trajectory(sid, t, e, tuple(records[sid][m] for m in sorted(records[sid])))
        for sid, (t, e) in subjects.items()
    ]
    return Dataset.from_trajectories(trajs, K=K, stage_boundaries=stage_boundaries, p=p)


def write_long_csv(data: Dataset, directory) -> None:
    """Write ``subjects.csv``, ``stages.csv`` and ``design.json`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, SUBJECTS_FILE), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "event"])
        for i in range(data.n):
            w.writerow([data.ids[i], format_float(data.time[i]), int(data.event[i])])
    with open(os.path.join(directory, STAGES_FILE), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "stage", "treatment"] + [f"x{j}" for j in range(1, data.p + 1)])
        for i in range(data.n):
            for m in range(int(data.n_stages[i])):
                w.writerow(
                    [data.ids[i], m + 1, int(data.treatments[i, m])]
                    + [format_float(x) for x in data.covariates[i, m]]
                )
    with open(os.path.join(directory, DESIGN_FILE), "w", encoding="utf-8") as fh:
        json.dump({"K": data.K, "p": data.p, "stage_boundaries": list(data.stage_boundaries)}, fh, indent=2)
        fh.write("\n")


def load_dir(directory, stage_boundaries=None, K=None) -> Dataset:
    """Load a directory written by :func:`write_long_csv` (design.json supplies defaults)."""
    design_path = os.path.join(directory, DESIGN_FILE)
    if os.path.exists(design_path):
        with open(design_path, encoding="utf-8") as fh:
            design = json.load(fh)
        stage_boundaries = design["stage_boundaries"] if stage_boundaries is None else stage_boundaries
        K = design.get("K") if K is None else K
    if stage_boundaries is None:
        raise DataError(f"{directory}: no design.json and no stage boundaries given")
    return load_long_csv(
        os.path.join(directory, SUBJECTS_FILE),
        os.path.join(directory, STAGES_FILE),
        stage_boundaries=stage_boundaries,
        K=K,
    )


def _require_columns(found, expected, path):
    if found is None or list(found[: len(expected)]) != expected:
        raise DataError(f"{path}: header must start with {','.join(expected)}")


def _parse_float(s: str, what: str) -> float:
    try:
        v = float(s)
    except (TypeError, ValueError):
        raise DataError(f"non-numeric {what}: {s!r}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite {what}")
    return v


def _parse_int(s: str, what: str) -> int:
    try:
        return int(s)
    except (TypeError, ValueError):
        raise DataError(f"non-integer {what}: {s!r}") from None
