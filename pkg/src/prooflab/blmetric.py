"""Bounded-Lipschitz distance between finite goal measures."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.optimize import linprog

from .errors import ContractError, ResourceError
from .mdp import ProverState

MAX_SUPPORT = 64


@dataclass(frozen=True)
class MetricSpace:
    dist: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.dist, float)
        object.__setattr__(self, "dist", d)
        check_metric(d)

    @property
    def size(self) -> int:
        return len(self.dist)

    @classmethod
    def from_points(cls, coords) -> "MetricSpace":
        """Euclidean distances between the rows of ``coords``."""
        x = np.atleast_2d(np.asarray(coords, float))
        if x.shape[0] == 1 and x.ndim == 2 and np.asarray(coords).ndim == 1:
            x = x.T
        diff = x[:, None, :] - x[None, :, :]
        return cls(np.sqrt((diff ** 2).sum(axis=-1)))


def check_metric(d: np.ndarray, tol: float = 1e-9):
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractError("distance table must be square")
    if np.any(d < -tol) or np.any(np.abs(np.diag(d)) > tol) or np.any(np.abs(d - d.T) > tol):
        raise ContractError("distance table must be symmetric, nonnegative, zero on the diagonal")
    # d[i, k] <= d[i, j] + d[j, k] for all triples
    if np.any(d[:, None, :] > d[:, :, None] + d[None, :, :] + tol):
        raise ContractError("distance table violates the triangle inequality")


@dataclass
class DiscreteMeasure:
    space: MetricSpace
    masses: np.ndarray

    def __post_init__(self):
        self.masses = np.asarray(self.masses, float)
        if self.masses.shape != (self.space.size,):
            raise ContractError("one mass per point of the space is required")
        if np.any(self.masses < 0):
            raise ContractError("masses must be nonnegative")

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @classmethod
    def dirac(cls, space: MetricSpace, point: int, mass: float = 1.0) -> "DiscreteMeasure":
        m = np.zeros(space.size)
        m[point] = mass
        return cls(space, m)

    @classmethod
    def zero(cls, space: MetricSpace) -> "DiscreteMeasure":
        return cls(space, np.zeros(space.size))


@dataclass
class BLResult:
    value: float
    witness: np.ndarray
    support: np.ndarray
    dual_value: float

    @property
    def duality_gap(self) -> float:
        return abs(self.value - self.dual_value)


def d_bl_lp(mu: DiscreteMeasure, nu: DiscreteMeasure) -> BLResult:
    """Solve max sum (mu - nu) f over |f| <= 1, |f_i - f_j| <= d_ij."""
    if mu.space is not nu.space and not np.array_equal(mu.space.dist, nu.space.dist):
        raise ContractError("measures live on different metric spaces")
    diff = mu.masses - nu.masses
    support = np.flatnonzero((mu.masses > 0) | (nu.masses > 0))
    n = len(support)
    if n > MAX_SUPPORT:
        raise ResourceError(f"support of size {n} exceeds {MAX_SUPPORT}")
    if n == 0:
        return BLResult(0.0, np.zeros(0), support, 0.0)
    c = -diff[support]
    d = mu.space.dist[np.ix_(support, support)]
    rows, b = [], []
    for i in range(n):
        for j in range(i + 1, n):
            r = np.zeros(n)
            r[i], r[j] = 1.0, -1.0
            rows.append(r)
            rows.append(-r)
            b.extend([d[i, j], d[i, j]])
    A = np.array(rows) if rows else None
    b = np.array(b) if rows else None
    res = linprog(c, A_ub=A, b_ub=b, bounds=[(-1.0, 1.0)] * n, method="highs")
    if res.status != 0:
        raise RuntimeError(f"LP failed: {res.message}")
    primal = -float(res.fun)
    # dual objective of the minimization, negated back to the max problem
    dual = -np.full(n, -1.0) @ res.lower.marginals - np.ones(n) @ res.upper.marginals
    if rows:
        dual -= b @ res.ineqlin.marginals
    return BLResult(primal, res.x, support, float(dual))


def d_bl(mu: DiscreteMeasure, nu: DiscreteMeasure) -> float:
    return d_bl_lp(mu, nu).value


def goal_embed(state: ProverState, embedding: Union[dict, Callable], space: MetricSpace) -> DiscreteMeasure:
    """Sum of unit Diracs at the embedded goals; Success maps to the zero measure."""
    masses = np.zeros(space.size)
    lookup = embedding.__getitem__ if isinstance(embedding, dict) else embedding
    for g in state.goals:
        masses[lookup(g)] += 1.0
    return DiscreteMeasure(space, masses)
