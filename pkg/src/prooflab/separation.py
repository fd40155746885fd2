"""Flat vs hierarchical sample-complexity separation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cutelim import decision_counts, unfold
from .dag import GenParams, make_conditionals, sample_dag
from .mdp import DagKernel
from .policy import TabularPolicy, floor_project
from .search import TopKConfig, backtracking_search, reference_trace


def wilson_interval(successes: int, n: int, z: float = 1.96) -> tuple:
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class Instance:
    kernel: DagKernel
    classes: list  # decision-class keys seen by the learner
    q_rows: np.ndarray  # generator conditional of each class
    keying: str


def build_instance(params: GenParams, mode: str, rng: np.random.Generator) -> Instance:
    """Sample a DAG and list the decision classes a learner of ``mode`` faces."""
    z = sample_dag(params, rng)
    q = make_conditionals(z, params, rng)
    tree = unfold(z)
    kernel = DagKernel(z, mode, tree=tree)
    trace = reference_trace(kernel)
    if mode == "flat":
        classes = [r.cand_id for r in trace.records]
        # occurrence keys look like "dec@17:0"; the conditional is shared by uid
        rows = []
        for r in trace.records:
            kind, rest = r.cand_id.split("@")
            occ, stepno = rest.split(":")
            rows.append(q.probs(f"{kind}:{tree.uid[int(occ)]}:{stepno}"))
        keying = "occurrence"
    else:
        classes = [r.cand_id for r in trace.records]
        rows = [q.probs(c) for c in classes]
        keying = "shared"
    return Instance(kernel, classes, np.array(rows), keying)


def fit_from_mixture(inst: Instance, n: int, rho: float, rng: np.random.Generator) -> TabularPolicy:
    """ERM on n decision samples drawn from the uniform time-mixture of the proof."""
    N = len(inst.classes)
    per_class = rng.multinomial(n, np.full(N, 1.0 / N))
    table = {}
    for key, c, q in zip(inst.classes, per_class, inst.q_rows):
        counts = rng.multinomial(c, q) if c else np.zeros(len(q))
        table[key] = floor_project(counts, rho)
    M = inst.q_rows.shape[1]
    return TabularPolicy(table, M, rho, inst.keying, np.full(M, 1.0 / M))


def success_rate(params: GenParams, mode: str, n: int, n_eval: int, k: int, rho: float,
                 seed_seq: np.random.SeedSequence) -> int:
    """Number of evaluation instances proved after training on n samples."""
    wins = 0
    for child in seed_seq.spawn(n_eval):
        rng = np.random.default_rng(child)
        inst = build_instance(params, mode, rng)
        pol = fit_from_mixture(inst, n, rho, rng)
        cfg = TopKConfig(k_dec=k, k_sol=k, k_flat=k)
        policies = {"flat": pol} if mode == "flat" else {"dec": pol, "sol": pol}
        wins += backtracking_search(inst.kernel, policies, cfg).success
    return wins


@dataclass
class ModeResult:
    D: int
    mode: str
    n_star: int
    n_lo: int
    n_hi: int
    evaluated: dict = field(default_factory=dict)  # n -> successes


def _stream(master: int, D: int, mode: str, n: int) -> np.random.SeedSequence:
    # instances are shared across modes and sample sizes (common random numbers)
    return np.random.SeedSequence([master, D])


def minimal_n(params: GenParams, mode: str, grid: list, n_eval: int, delta: float, k: int,
              rho: float, master: int) -> ModeResult:
    """Bisection over ``grid`` for the smallest n reaching success >= 1 - delta.

    Also locates the grid points where the Wilson upper and lower bounds first
    clear 1 - delta, which bracket the minimal n.
    """
    evaluated: dict = {}

    def succ(i):
        n = grid[i]
        if n not in evaluated:
            evaluated[n] = success_rate(params, mode, n, n_eval, k, rho,
                                        _stream(master, params.D, mode, n))
        return evaluated[n]

    def first(pred):
        lo, hi = 0, len(grid) - 1
        if not pred(hi):
            return len(grid) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if pred(mid):
                hi = mid
            else:
                lo = mid + 1
        return lo

    target = 1 - delta
    i_star = first(lambda i: succ(i) / n_eval >= target)
    i_lo = first(lambda i: wilson_interval(succ(i), n_eval)[1] >= target)
    i_hi = first(lambda i: wilson_interval(succ(i), n_eval)[0] >= target)
    return ModeResult(params.D, mode, grid[i_star], grid[i_lo], grid[i_hi], evaluated)


@dataclass
class SeparationReport:
    results: list
    counts: dict  # D -> (N_flat, N_hier)
    slope_flat: float
    slope_hier: float

    def by(self, D, mode) -> ModeResult:
        return next(r for r in self.results if r.D == D and r.mode == mode)

    def ratio(self, D) -> float:
        return self.by(D, "flat").n_star / self.by(D, "hier").n_star

    def ratio_interval(self, D) -> tuple:
        f, h = self.by(D, "flat"), self.by(D, "hier")
        return f.n_lo / h.n_hi, f.n_hi / h.n_lo

    @property
    def depths(self) -> list:
        return sorted(self.counts)

    def strictly_increasing(self) -> bool:
        r = [self.ratio(D) for D in self.depths]
        return all(b > a for a, b in zip(r, r[1:]))

    def interval_separated(self) -> bool:
        iv = [self.ratio_interval(D) for D in self.depths]
        return all(b[0] > a[1] for a, b in zip(iv, iv[1:]))


def geometric_grid(n_min: int, n_max: int, ratio: float) -> list:
    grid, n = [], float(n_min)
    while n <= n_max:
        if not grid or int(round(n)) > grid[-1]:
            grid.append(int(round(n)))
        n *= ratio
    return grid


def run_separation(base: GenParams, depths=(1, 2, 3), grid=None, n_eval: int = 200,
                   delta: float = 0.2, k: int = 1, rho: float = 0.01, master: int = 0) -> SeparationReport:
    grid = grid or geometric_grid(4, 2_000_000, 1.15)
    results, counts = [], {}
    for D in depths:
        params = GenParams(**{**base.__dict__, "D": D})
        z = sample_dag(params, np.random.default_rng(0))
        dc = decision_counts(z, unfold(z))
        counts[D] = (dc.N_flat, dc.N_hier)
        for mode in ("hier", "flat"):
            results.append(minimal_n(params, mode, grid, n_eval, delta, k, rho, master))
    log_n = {m: [math.log(next(r.n_star for r in results if r.D == D and r.mode == m))
                 for D in depths] for m in ("flat", "hier")}
    slope = {m: float(np.polyfit(list(depths), log_n[m], 1)[0]) for m in log_n}
    return SeparationReport(results, counts, slope["flat"], slope["hier"])
