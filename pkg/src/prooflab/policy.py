"""Tabular policies with a probability floor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ParameterError


def floor_project(counts, rho: float) -> np.ndarray:
    """Maximize sum(counts * log p) over {p >= rho, sum(p) = 1}.

    The optimum is p_a = max(rho, counts_a / lam) with lam fixed by the unit
    sum (water-filling).  With no counts the uniform vector is returned.
    """
    n = np.asarray(counts, dtype=float)
    M = len(n)
    if rho * M > 1 + 1e-12:
        raise ParameterError("rho * M must not exceed 1")
    if np.any(n < 0):
        raise ParameterError("counts must be nonnegative")
    total = n.sum()
    if total <= 0:
        return np.full(M, 1.0 / M)
    order = np.argsort(-n, kind="stable")
    srt = n[order]
    csum = np.cumsum(srt)
    p = np.full(M, rho)
    for j in range(1, M + 1):
        free_mass = 1.0 - (M - j) * rho
        lam = csum[j - 1] / free_mass
        if srt[j - 1] / lam >= rho and (j == M or srt[j] / lam <= rho):
            p[order[:j]] = srt[:j] / lam
            return p
    return np.full(M, 1.0 / M)


@dataclass
class TabularPolicy:
    """Categorical distribution per decision class.

    ``keying`` selects whether classes are shared subgoals ("shared") or
    tree occurrences ("occurrence").  ``default`` is returned for classes
    that were never fitted; None makes lookups of unknown classes fail.
    """

    table: dict
    M: int
    rho: float = 0.0
    keying: str = "shared"
    default: Optional[np.ndarray] = field(default=None, repr=False)

    def probs(self, key: str) -> np.ndarray:
        p = self.table.get(key)
        if p is None:
            if self.default is None:
                raise KeyError(key)
            return self.default
        return p

    def key_for(self, kernel, state) -> str:
        dp = kernel.decision_point(state)
        return dp.occurrence_key if self.keying == "occurrence" else dp.key

    def action_probs(self, kernel, state) -> np.ndarray:
        return self.probs(self.key_for(kernel, state))

    def check(self, tol: float = 1e-12) -> bool:
        for p in self.table.values():
            if abs(p.sum() - 1) > tol or p.min() < self.rho - tol:
                return False
        return True

    @classmethod
    def uniform(cls, M: int, keying: str = "shared") -> "TabularPolicy":
        return cls({}, M, 1.0 / M, keying, np.full(M, 1.0 / M))
