"""Simplex treatment coding, angle-based decision rules and linear policies."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import Dataset, history_dim, history_matrix

__all__ = [
    "SimplexCode",
    "build_simplex",
    "classify_scores",
    "recommend",
    "PolicySet",
    "evaluate_policy",
    "FixedRule",
    "ConstantRule",
]


@dataclass(frozen=True, eq=False)
class SimplexCode:
    k: int
    vertices: np.ndarray  # (K, K-1); row j-1 is V_j

    def vertex(self, treatment: int) -> np.ndarray:
        return self.vertices[treatment - 1]


def build_simplex(K: int) -> SimplexCode:
    """Vertices of the centred regular simplex in R^(K-1) with unit-norm corners."""
    K = int(K)
    if K < 2:
        raise ValueError("need at least two treatment categories")
    d = K - 1
    V = np.empty((K, d))
    V[0] = np.full(d, 1.0 / np.sqrt(d))
    shift = -(1.0 + np.sqrt(K)) / d**1.5
    scale = np.sqrt(K / d)
    for j in range(1, K):
        V[j] = shift
        V[j, j - 1] += scale
    V.setflags(write=False)
    return SimplexCode(K, V)


def classify_scores(code: SimplexCode, f) -> np.ndarray:
    """Inner products ``<V_A, f>`` for every treatment A; works row-wise on 2-D ``f``."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != code.k - 1:
        raise ValueError(f"score vector must have length {code.k - 1}, got {f.shape[-1]}")
    return f @ code.vertices.T


def recommend(code: SimplexCode, f):
    """Treatment with the smallest angle to ``f``; exact ties go to the smallest label."""
    s = classify_scores(code, f)
    rec = np.argmax(s, axis=-1) + 1
    return int(rec) if np.ndim(rec) == 0 else rec


@dataclass(frozen=True, eq=False)
class PolicySet:
    """Linear classification functions ``f_m(H_m) = coef_m @ H_m + intercept_m`` for stages 1..m_g."""

    coefs: tuple[np.ndarray, ...]
    intercepts: tuple[np.ndarray, ...]
    p: int
    K: int
    stage_boundaries: tuple[float, ...]

    def __post_init__(self):
        coefs = tuple(np.array(c, dtype=float) for c in self.coefs)
        intercepts = tuple(np.array(c, dtype=float).reshape(-1) for c in self.intercepts)
        if len(coefs) != len(intercepts) or not coefs:
            raise ValueError("need one coefficient block and intercept per stage")
        for m, (c, b) in enumerate(zip(coefs, intercepts), start=1):
            if c.shape != (self.K - 1, history_dim(m, self.p)) or b.shape != (self.K - 1,):
                raise ValueError(
                    f"stage {m}: expected block ({self.K - 1}, {history_dim(m, self.p)}), got {c.shape}"
                )
            if not (np.all(np.isfinite(c)) and np.all(np.isfinite(b))):
                raise ValueError(f"stage {m}: non-finite coefficients")
        object.__setattr__(self, "coefs", coefs)
        object.__setattr__(self, "intercepts", intercepts)
        object.__setattr__(self, "stage_boundaries", tuple(float(x) for x in self.stage_boundaries))

    @property
    def m_g(self) -> int:
        return len(self.coefs)

    @property
    def code(self) -> SimplexCode:
        return build_simplex(self.K)

    @classmethod
    def zeros(cls, p: int, K: int, m_g: int, stage_boundaries) -> "PolicySet":
        return cls(
            coefs=tuple(np.zeros((K - 1, history_dim(m, p))) for m in range(1, m_g + 1)),
            intercepts=tuple(np.zeros(K - 1) for _ in range(m_g)),
            p=p,
            K=K,
            stage_boundaries=tuple(stage_boundaries),
        )

    # parameter vector layout: per stage, coefficient block row-major then intercept

    @property
    def n_params(self) -> int:
        return sum(c.size + b.size for c, b in zip(self.coefs, self.intercepts))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([c.ravel(), b]) for c, b in zip(self.coefs, self.intercepts)])

    def with_vector(self, theta) -> "PolicySet":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"parameter vector must have length {self.n_params}")
        coefs, intercepts, pos = [], [], 0
        for c in self.coefs:
            coefs.append(theta[pos : pos + c.size].reshape(c.shape))
            pos += c.size
            intercepts.append(theta[pos : pos + c.shape[0]])
            pos += c.shape[0]
        return PolicySet(tuple(coefs), tuple(intercepts), self.p, self.K, self.stage_boundaries)

    def scale(self, c: float) -> "PolicySet":
        return self.with_vector(c * self.to_vector())

    def recommend_all(self, data: Dataset) -> np.ndarray:
        """(n, m_g) recommended labels; 0 where a subject never entered the stage."""
        _check_compatible(self, data)
        code = self.code
        out = np.zeros((data.n, self.m_g), dtype=int)
        for m in range(1, min(self.m_g, data.M) + 1):
            rows = data.stage_mask[:, m - 1]
            if not rows.any():
                continue
            H = history_matrix(data, m)[rows]
            out[rows, m - 1] = recommend(code, H @ self.coefs[m - 1].T + self.intercepts[m - 1])
        return out

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "K": self.K,
            "m_g": self.m_g,
            "stage_boundaries": list(self.stage_boundaries),
            "stages": [
                {"stage": m, "coef": c.tolist(), "intercept": b.tolist()}
                for m, (c, b) in enumerate(zip(self.coefs, self.intercepts), start=1)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicySet":
        stages = sorted(doc["stages"], key=lambda s: s["stage"])
        if len(stages) != doc["m_g"]:
            raise ValueError("m_g does not match the number of stage blocks")
        return cls(
            coefs=tuple(np.array(s["coef"], dtype=float).reshape(doc["K"] - 1, -1) for s in stages),
            intercepts=tuple(np.array(s["intercept"], dtype=float) for s in stages),
            p=int(doc["p"]),
            K=int(doc["K"]),
            stage_boundaries=tuple(doc["stage_boundaries"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate_policy(policy: PolicySet, h, m: int) -> np.ndarray:
    """``f_m(H_m)`` for one history vector (or a stack of them)."""
    if not 1 <= m <= policy.m_g:
        raise ValueError(f"policy has no stage {m}")
    h = np.asarray(h, dtype=float)
    coef = policy.coefs[m - 1]
    if h.shape[-1] != coef.shape[1]:
        raise ValueError(f"history for stage {m} must have length {coef.shape[1]}, got {h.shape[-1]}")
    return h @ coef.T + policy.intercepts[m - 1]


def _check_compatible(policy: PolicySet, data: Dataset) -> None:
    if policy.p != data.p or policy.K != data.K:
        raise ValueError(f"policy (p={policy.p}, K={policy.K}) does not match data (p={data.p}, K={data.K})")


@dataclass(frozen=True, eq=False)
class FixedRule:
    """Per-subject recommendations given directly, e.g. a simulated ground truth."""

    recommendations: np.ndarray  # (n, M)

    @property
    def m_g(self) -> int:
        return self.recommendations.shape[1]

    def recommend_all(self, data: Dataset) -> np.ndarray:
        rec = np.asarray(self.recommendations, dtype=int)
        if rec.shape[0] != data.n:
            raise ValueError("fixed recommendations do not match the number of subjects")
        width = min(rec.shape[1], data.M)
        return np.where(data.stage_mask[:, :width], rec[:, :width], 0)


@dataclass(frozen=True)
class ConstantRule:
    treatment: int
    m_g: int

    def recommend_all(self, data: Dataset) -> np.ndarray:
        return np.where(data.stage_mask[:, : self.m_g], self.treatment, 0)


def stack_vertices(code: SimplexCode, treatments: Sequence[int] | np.ndarray) -> np.ndarray:
    """Rows ``V_{A_i}``; label 0 (no record) maps to the zero vector."""
    A = np.asarray(treatments, dtype=int)
    out = np.zeros(A.shape + (code.k - 1,))
    valid = A > 0
    out[valid] = code.vertices[A[valid] - 1]
    return out
