"""Top-k ranking, coverage events, backtracking search and margin audits."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError
from .learners import kl
from .mdp import DecisionRecord, GoalToken, ProverState, Trace
from .policy import TabularPolicy


def top_k(policy, key, k: int) -> list:
    """Indices of the k most likely candidates; ties go to the lower index."""
    p = np.asarray(policy if isinstance(policy, (np.ndarray, list, tuple)) else policy.probs(key))
    if not 1 <= k <= len(p):
        raise ContractError(f"k={k} must lie in [1, {len(p)}]")
    return [int(i) for i in np.lexsort((np.arange(len(p)), -p))[:k]]


@dataclass
class TopKConfig:
    k_dec: int = 1
    k_sol: int = 1
    k_flat: int = 1
    budget: Optional[int] = None
    horizon: Optional[int] = None

    def __post_init__(self):
        if min(self.k_dec, self.k_sol, self.k_flat) < 1:
            raise ContractError("k values must be >= 1")
        if self.budget is not None and self.budget <= 0:
            raise ContractError("budget must be positive")

    def k_for(self, dtype: str) -> int:
        return {"dec": self.k_dec, "sol": self.k_sol, "flat": self.k_flat}[dtype]


def _policy_for(policies, dtype: str):
    if isinstance(policies, dict):
        return policies[dtype]
    return policies


def coverage_event(trace: Trace, policies, config: TopKConfig) -> bool:
    """True iff every recorded action is inside its top-k list."""
    for rec in trace.records:
        pol = _policy_for(policies, rec.dtype)
        if rec.choice not in top_k(pol, rec.cand_id, config.k_for(rec.dtype)):
            return False
    return True


def reference_trace(kernel, start: ProverState = None) -> Trace:
    """The proof obtained by always playing the reference action of a DagKernel."""
    x = x0 = kernel.initial_state() if start is None else start
    records = []
    t = 0
    while x.is_open:
        dp = kernel.decision_point(x)
        a = kernel.reference_choice(x.focus)
        cand = dp.occurrence_key if dp.mode == "flat" else dp.key
        records.append(DecisionRecord(t, x.canonical_key(), cand, a, dp.dtype))
        x = kernel.step(x, a)
        t += 1
    return Trace(records, x.status, x0.canonical_key())


@dataclass
class SearchResult:
    success: bool
    proof: list
    expansions: int
    exhausted: bool = False


class _BudgetExhausted(Exception):
    pass


def default_budget(kernel) -> int:
    dag = getattr(kernel, "dag", None)
    if dag is None:
        return 1_000_000
    from .cutelim import decision_counts, unfold
    tree = kernel.tree if kernel.tree is not None else unfold(dag)
    return 10 * decision_counts(dag, tree).N_flat


def backtracking_search(kernel, policies, config: TopKConfig, start: ProverState = None,
                        memo: Optional[bool] = None) -> SearchResult:
    """Depth-first AND-OR search restricted to top-k lists.

    OR nodes are decision points (one expansion each); AND nodes are the
    subgoals produced by a decomposition, proved left to right.  Rejected
    choices are skipped.  With ``memo`` (default: hierarchical mode only)
    solved and failed subgoals are cached by uid.
    """
    memo = (kernel.mode == "hier") if memo is None else memo
    budget = config.budget if config.budget is not None else default_budget(kernel)
    start = kernel.initial_state() if start is None else start
    solved: set = set()
    failed: set = set()
    count = [0]

    def decision(token):
        return kernel.decision_point(ProverState.of([token]))

    def policy_probs(token):
        dp = decision(token)
        pol = _policy_for(policies, dp.dtype)
        key = dp.occurrence_key if getattr(pol, "keying", "shared") == "occurrence" else dp.key
        return dp, pol.probs(key)

    def or_node(token: GoalToken):
        count[0] += 1
        if count[0] > budget:
            raise _BudgetExhausted
        dp, probs = policy_probs(token)
        for a in top_k(probs, None, config.k_for(dp.dtype)):
            if kernel.is_stall(token, a):
                continue
            new = kernel.expand(token, a)
            if new is None:
                continue
            rec = (dp.occurrence_key if dp.mode == "flat" else dp.key, a)
            if token.remaining > 0:
                sub = or_node(new[0]) if new else []
            else:
                sub = []
                for child in new:
                    part = prove(child)
                    if part is None:
                        sub = None
                        break
                    sub.extend(part)
            if sub is not None:
                return [rec] + sub
        return None

    def prove(token: GoalToken):
        if memo:
            if token.uid in solved:
                return []
            if token.uid in failed:
                return None
        out = or_node(token)
        if memo:
            (solved if out is not None else failed).add(token.uid)
        return out

    if start.is_success:
        return SearchResult(True, [], 0)
    if start.is_failure:
        return SearchResult(False, [], 0)
    try:
        proof = []
        for g in start.goals:
            part = prove(g)
            if part is None:
                return SearchResult(False, [], count[0])
            proof.extend(part)
    except _BudgetExhausted:
        return SearchResult(False, [], budget, exhausted=True)
    if config.horizon is not None and len(proof) > config.horizon:
        return SearchResult(False, [], count[0])
    return SearchResult(True, proof, count[0])


# ---------------------------------------------------------------------------
# margins

@dataclass
class MarginStats:
    key: str
    q_sorted: np.ndarray
    gap: float
    top_mass: float
    misranked: bool
    sup_dev: float
    kl: float


@dataclass
class MarginReport:
    stats: list
    violations: dict
    misrank_rate: float
    weighted_misrank_rate: float
    weighted_mass_loss: float

    @property
    def total_violations(self) -> int:
        return sum(self.violations.values())


def gap_and_mass(q, k: int) -> tuple:
    """(Delta_k, m_k) with the convention q_(M+1) = 0."""
    srt = np.sort(np.asarray(q, float))[::-1]
    nxt = srt[k] if k < len(srt) else 0.0
    return float(srt[k - 1] - nxt), float(srt[:k].sum())


def margin_audit(policy, q, mixture, k: int = 1, tol: float = 1e-12) -> MarginReport:
    """Check the misranking inequality chain at every decision class.

    ``mixture`` maps keys to weights (or is any iterable of keys).
    """
    if isinstance(mixture, dict):
        items = list(mixture.items())
    else:
        items = [(key, 1.0) for key in mixture]
    total_w = sum(w for _, w in items)
    violations = {"mass_decomposition": 0, "sup_deviation": 0, "kl_lower_bound": 0, "pinsker": 0}
    stats = []
    mis_w = 0.0
    loss_w = 0.0
    for key, w in items:
        qv = np.asarray(q.probs(key) if not isinstance(q, dict) else q[key], float)
        pv = np.asarray(policy.probs(key) if not isinstance(policy, dict) else policy[key], float)
        gap, mass = gap_and_mass(qv, k)
        top_pi = top_k(pv, None, k)
        misranked = set(top_pi) != set(top_k(qv, None, k))
        sup = float(np.max(np.abs(pv - qv)))
        div = kl(qv, pv)
        lost = 1.0 - float(qv[top_pi].sum())
        if lost > (1.0 - mass) + float(misranked) + tol:
            violations["mass_decomposition"] += 1
        if misranked and sup < gap / 2 - tol:
            violations["sup_deviation"] += 1
        if misranked and div < gap ** 2 / 8 - tol:
            violations["kl_lower_bound"] += 1
        if sup ** 2 > 2 * div + tol:
            violations["pinsker"] += 1
        stats.append(MarginStats(key, np.sort(qv)[::-1], gap, mass, misranked, sup, div))
        mis_w += w * misranked
        loss_w += w * lost
    n = len(stats)
    return MarginReport(stats, violations,
                        sum(s.misranked for s in stats) / n if n else 0.0,
                        mis_w / total_w if total_w else 0.0,
                        loss_w / total_w if total_w else 0.0)


def swap_policy(q, threshold: float, rho: float = 0.0) -> TabularPolicy:
    """Policy equal to q except that classes with Delta_1 <= threshold swap ranks 1 and 2.

    Sweeping ``threshold`` gives a family of policies whose misranking rate
    and mixture KL trace out the worst-case margin trade-off.
    """
    table = {}
    for key in q.keys():
        p = np.array(q.probs(key), float)
        gap, _ = gap_and_mass(p, 1)
        if gap <= threshold:
            first, second = top_k(p, None, 2)
            p[first], p[second] = p[second], p[first]
        table[key] = p
    return TabularPolicy(table, q.M, rho)


def misranking_slope(q, thresholds, k: int = 1) -> tuple:
    """Fit log(misranking rate) against log(mixture KL) over the swap family.

    Returns (slope, rates, kls).
    """
    rates, kls = [], []
    keys = q.keys()
    for u in thresholds:
        pol = swap_policy(q, u)
        rep = margin_audit(pol, q, keys, k)
        rates.append(rep.misrank_rate)
        kls.append(float(np.mean([s.kl for s in rep.stats])))
    rates = np.array(rates)
    kls = np.array(kls)
    ok = (rates > 0) & (kls > 0)
    if ok.sum() < 2:
        return math.nan, rates, kls
    slope = float(np.polyfit(np.log(kls[ok]), np.log(rates[ok]), 1)[0])
    return slope, rates, kls


def union_bound_check(success_rate: float, K: float, mass_loss: float, misrank_rate: float) -> bool:
    """Empirical success >= 1 - K * E[1 - m_k] - K * misranking rate."""
    return success_rate >= 1.0 - K * mass_loss - K * misrank_rate - 1e-12
