"""Layered proof-DAG generator and generator action conditionals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, ParameterError


@dataclass
class GenParams:
    D: int = 2
    b_eff: int = 2
    r: int = 2
    alpha: float = 0.5
    K0: float = 2.0
    term_profile: Optional[Sequence[float]] = None
    M: int = 4
    beta: float = 1.0
    C0: float = 1.0
    rho: float = 0.05
    seed: int = 0
    gap_rank: int = 1
    random_parents: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.D < 1:
            raise ParameterError("D must be >= 1")
        if self.b_eff < 1 or self.r < 1:
            raise ParameterError("b_eff and r must be >= 1")
        if not 0 < self.alpha < 1:
            raise ParameterError("alpha must lie in (0, 1)")
        if self.K0 <= 0:
            raise ParameterError("K0 must be positive")
        if self.M < 2:
            raise ParameterError("M must be >= 2")
        if not self.beta > 0 or not self.C0 > 0:
            raise ParameterError("beta and C0 must be positive")
        if not 0 < self.rho < 1:
            raise ParameterError("rho must lie in (0, 1)")
        if self.rho * self.M > 1:
            raise ParameterError("rho * M must not exceed 1")
        if not 1 <= self.gap_rank < self.M:
            raise ParameterError("gap_rank must lie in [1, M)")
        for d in range(2, self.D + 1):
            if self.r > self.b_eff ** (d - 1):
                raise ParameterError(
                    f"r={self.r} exceeds the {self.b_eff ** (d - 1)} available parents at depth {d - 1}")
        prof = self.profile()
        if any(not 0 <= p <= 1 for p in prof):
            raise ParameterError("terminal probabilities must lie in [0, 1]")

    def profile(self) -> list:
        if self.term_profile is None:
            return [0.0] * self.D + [1.0]
        prof = [float(p) for p in self.term_profile]
        if len(prof) != self.D + 1:
            raise ParameterError("term_profile needs D+1 entries")
        return prof[:-1] + [1.0]


def constant_profile(D: int, tau: float) -> list:
    """Root non-terminal, probability ``tau`` at depths 1..D-1, all terminal at D."""
    return [0.0] + [tau] * (D - 1) + [1.0]


@dataclass(frozen=True)
class DagNode:
    uid: int
    depth: int
    terminal: bool
    length: int  # solver length L_u, 0 for decomposition nodes
    actions: tuple  # reference choice per decision point


@dataclass
class ProofDag:
    nodes: list
    edges: list  # (parent, child); repeated pairs are parallel child occurrences
    M: int
    root: int = 0
    children: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.children:
            self.children = {n.uid: [] for n in self.nodes}
            for p, c in self.edges:
                self.children[p].append(c)

    @property
    def D(self) -> int:
        return max(n.depth for n in self.nodes)

    def layer(self, d: int) -> list:
        return [n.uid for n in self.nodes if n.depth == d]

    def parents(self, uid: int) -> list:
        return [p for p, c in self.edges if c == uid]

    def __eq__(self, other):
        return (isinstance(other, ProofDag) and self.nodes == other.nodes
                and self.edges == other.edges and self.M == other.M and self.root == other.root)

    def check(self):
        """Raise ContractError if the layering invariants fail."""
        if self.nodes[self.root].depth != 0:
            raise ContractError("root must sit at depth 0")
        for i, n in enumerate(self.nodes):
            if n.uid != i:
                raise ContractError("uids must be consecutive")
            if n.terminal:
                if n.length < 1 or len(n.actions) != n.length or self.children[n.uid]:
                    raise ContractError(f"terminal node {n.uid} malformed")
            elif len(n.actions) != 1 or not self.children[n.uid]:
                raise ContractError(f"decomposition node {n.uid} malformed")
            if any(not 0 <= a < self.M for a in n.actions):
                raise ContractError(f"node {n.uid} has an action outside the candidate set")
        has_parent = set()
        for p, c in self.edges:
            if self.nodes[c].depth != self.nodes[p].depth + 1:
                raise ContractError(f"edge {p}->{c} skips a layer")
            has_parent.add(c)
        for n in self.nodes:
            if n.uid != self.root and n.uid not in has_parent:
                raise ContractError(f"node {n.uid} has no parent")
        return True


@dataclass
class SuffStats:
    C: np.ndarray
    T: np.ndarray
    S: np.ndarray

    @property
    def Lbar(self) -> np.ndarray:
        out = np.zeros(len(self.S))
        pos = self.T > 0
        out[pos] = self.S[pos] / self.T[pos]
        return out


def _solver_length(mean: float, rng: np.random.Generator) -> int:
    if mean <= 1.0:
        return 1
    return int(rng.geometric(1.0 / mean))


def _terminal_flags(n: int, tau: float, rng: np.random.Generator) -> np.ndarray:
    if tau >= 1.0:
        return np.ones(n, dtype=bool)
    while True:
        flags = rng.random(n) < tau
        if not flags.all():
            return flags


def sample_dag(params: GenParams, rng: np.random.Generator = None) -> ProofDag:
    """Draw a layered reuse DAG with |U_d| = b_eff**d."""
    params.validate()
    rng = np.random.default_rng(params.seed) if rng is None else rng
    prof = params.profile()
    M = params.M
    nodes: list = []
    edges: list = []
    flags = [bool(_terminal_flags(1, prof[0], rng)[0])] if params.D > 0 else [True]
    layer_flags = {0: flags}
    layer_uids = {0: [0]}
    next_uid = 1
    for d in range(1, params.D + 1):
        parents = [u for u, t in zip(layer_uids[d - 1], layer_flags[d - 1]) if not t]
        if not parents:
            break
        size = params.b_eff ** d
        uids = list(range(next_uid, next_uid + size))
        next_uid += size
        order = rng.permutation(size)
        p = len(parents)
        for j, ci in enumerate(order):
            child = uids[ci]
            if params.random_parents and p >= params.r:
                chosen = rng.choice(p, size=params.r, replace=False)
            else:
                chosen = [(j * params.r + t) % p for t in range(params.r)]
            for idx in sorted(chosen):
                edges.append((parents[idx], child))
        layer_uids[d] = uids
        layer_flags[d] = list(_terminal_flags(size, prof[d], rng))
    for d in sorted(layer_uids):
        for uid, term in zip(layer_uids[d], layer_flags[d]):
            if term:
                L = _solver_length(params.K0 * params.alpha ** d, rng)
                acts = tuple(int(a) for a in rng.integers(M, size=L))
                nodes.append(DagNode(uid, d, True, L, acts))
            else:
                nodes.append(DagNode(uid, d, False, 0, (int(rng.integers(M)),)))
    edges.sort()
    return ProofDag(nodes, edges, M)


def suff_stats(z: ProofDag, D: Optional[int] = None) -> SuffStats:
    D = z.D if D is None else D
    C = np.zeros(D + 1, dtype=np.int64)
    T = np.zeros(D + 1, dtype=np.int64)
    S = np.zeros(D + 1, dtype=np.int64)
    for n in z.nodes:
        C[n.depth] += 1
        if n.terminal:
            T[n.depth] += 1
            S[n.depth] += n.length
    return SuffStats(C, T, S)


def path_multiplicity(z: ProofDag) -> dict:
    """Number of root-to-node paths for every uid (parallel edges count twice)."""
    mult = {n.uid: 0 for n in z.nodes}
    mult[z.root] = 1
    for n in sorted(z.nodes, key=lambda n: (n.depth, n.uid)):
        for c in z.children[n.uid]:
            mult[c] += mult[n.uid]
    return mult


def margin_profile(M: int, gap: float, rho: float, k: int = 1, ratio: float = 0.5) -> np.ndarray:
    """Rank-ordered probabilities with q_(k) - q_(k+1) = gap and floor rho.

    Ranks below k+1 decay geometrically above the floor; ranks up to k sit
    on a matching ladder above q_(k+1) + gap.
    """
    if rho * M > 1:
        raise ParameterError("rho * M must not exceed 1")
    if not 1 <= k < M:
        raise ParameterError("k must lie in [1, M)")
    slack = 1.0 - M * rho - k * gap
    if slack < -1e-12 or gap < 0:
        raise ParameterError(f"gap {gap} infeasible for M={M}, rho={rho}, k={k}")
    slack = max(slack, 0.0)
    top = np.array([1 + ratio ** (j - 1) - ratio ** (k - 1) for j in range(1, k + 1)])
    tail = ratio ** np.arange(M - k)
    c = slack / (top.sum() + tail.sum())
    return np.concatenate([rho + gap + c * top, rho + c * tail])


def gap_max(M: int, rho: float, k: int = 1) -> float:
    return (1.0 - M * rho) / k


def sample_gap(beta: float, C0: float, gmax: float, rng: np.random.Generator, size=None):
    """Gap with distribution function min(1, C0 u^beta), truncated to [0, gmax]."""
    if math.isinf(beta):
        top = gmax
    else:
        top = min(C0 ** (-1.0 / beta), gmax)
    if math.isinf(beta):
        return np.full(size, top) if size is not None else top
    return top * rng.random(size) ** (1.0 / beta)


@dataclass
class GeneratorConditionals:
    """Per decision class: a categorical over M candidates with its reference action."""

    table: dict
    ref: dict
    gap: dict
    M: int
    rho: float
    k: int = 1
    keying: str = "shared"

    def probs(self, key: str) -> np.ndarray:
        return self.table[key]

    def action_probs(self, kernel, state) -> np.ndarray:
        return self.table[kernel.decision_point(state).key]

    def keys(self):
        return list(self.table)


def decision_keys(z: ProofDag) -> list:
    """Keys of every unique decision point of the DAG, with reference choices."""
    out = []
    for n in z.nodes:
        if n.terminal:
            out.extend((f"sol:{n.uid}:{s}", a) for s, a in enumerate(n.actions))
        else:
            out.append((f"dec:{n.uid}:0", n.actions[0]))
    return out


def make_conditionals(z: ProofDag, params: GenParams, rng: np.random.Generator = None,
                      gmax: Optional[float] = None) -> GeneratorConditionals:
    """Designed-margin categorical at every decision point of ``z``."""
    if params.rho * params.M > 1:
        raise ParameterError("rho * M must not exceed 1")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    M, k = params.M, params.gap_rank
    gmax = gap_max(M, params.rho, k) if gmax is None else gmax
    table, ref, gaps = {}, {}, {}
    for key, a in decision_keys(z):
        g = float(sample_gap(params.beta, params.C0, gmax, rng))
        prof = margin_profile(M, g, params.rho, k)
        others = [i for i in range(M) if i != a]
        others = [others[i] for i in rng.permutation(M - 1)]
        p = np.empty(M)
        p[a] = prof[0]
        p[others] = prof[1:]
        table[key] = p
        ref[key] = a
        gaps[key] = g
    return GeneratorConditionals(table, ref, gaps, M, params.rho, k)
