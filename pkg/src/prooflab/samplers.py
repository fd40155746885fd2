"""Success-conditioned trace sampling: exact h tables, Doob policies, twisted SMC."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError, NullEventError, ResourceError
from .mdp import DEFAULT_STATE_CAP, DecisionRecord, ProverState, Trace, _sample


class SuccessToGo:
    """h_r(x) = probability that rollouts of q reach Success within r steps.

    Values are computed lazily by the backward recursion and memoized.
    """

    def __init__(self, q, kernel, L: int, cap: int = DEFAULT_STATE_CAP):
        self.q = q
        self.kernel = kernel
        self.L = L
        self.cap = cap
        self.table: dict = {}
        self._states: set = set()

    def __call__(self, x: ProverState, r: int) -> float:
        hit = self.table.get((x, r))
        if hit is not None:
            return hit
        if x not in self._states:
            self._states.add(x)
            if len(self._states) > self.cap:
                raise ResourceError(f"reachable state set exceeds cap {self.cap}")
        if x.is_success:
            v = 1.0
        elif x.is_failure or r <= 0:
            v = 0.0
        else:
            probs = self.q.action_probs(self.kernel, x)
            v = 0.0
            for a in np.flatnonzero(probs):
                v += probs[a] * self(self.kernel.step(x, int(a)), r - 1)
        self.table[(x, r)] = v
        return v

    @property
    def n_states(self) -> int:
        return len(self._states)


def success_to_go(q, kernel, L: int, start: ProverState = None,
                  cap: int = DEFAULT_STATE_CAP) -> SuccessToGo:
    """Exact success-to-go table, filled for everything reachable from ``start``."""
    h = SuccessToGo(q, kernel, L, cap)
    h(kernel.initial_state() if start is None else start, L)
    return h


class DoobPolicy:
    """q*_r(a|x) = q(a|x) h_{r-1}(F(x,a)) / h_r(x)."""

    def __init__(self, q, h: SuccessToGo):
        self.q = q
        self.h = h
        self.kernel = h.kernel

    def probs(self, x: ProverState, r: int) -> np.ndarray:
        hx = self.h(x, r)
        if hx <= 0:
            raise NullEventError(f"h_{r} is zero at {x.canonical_key()}")
        q = self.q.action_probs(self.kernel, x)
        nxt = np.array([self.h(self.kernel.step(x, a), r - 1) if q[a] > 0 else 0.0
                        for a in range(len(q))])
        return q * nxt / hx

    def rollout(self, rng: np.random.Generator, start: ProverState = None) -> Trace:
        x = x0 = self.kernel.initial_state() if start is None else start
        records = []
        for t in range(self.h.L):
            if not x.is_open:
                break
            a = _sample(self.probs(x, self.h.L - t), rng)
            records.append(_record(self.kernel, x, t, a))
            x = self.kernel.step(x, a)
        return Trace(records, x.status, x0.canonical_key())


def doob_policy(q, h: SuccessToGo) -> DoobPolicy:
    return DoobPolicy(q, h)


def _record(kernel, x, t, a) -> DecisionRecord:
    dp = kernel.decision_point(x)
    cand = dp.occurrence_key if dp.mode == "flat" else dp.key
    return DecisionRecord(t, x.canonical_key(), cand, int(a), dp.dtype)


def enumerate_paths(q, kernel, L: int, start: ProverState = None, max_paths: int = 10_000):
    """All action sequences of q up to horizon L, with their probabilities.

    A path stops at Success, Failure or after L actions.  Returns a list of
    (actions tuple, probability, final state).
    """
    start = kernel.initial_state() if start is None else start
    out = []
    stack = [(start, (), 1.0)]
    while stack:
        x, acts, p = stack.pop()
        if not x.is_open or len(acts) == L:
            out.append((acts, p, x))
            if len(out) > max_paths:
                raise ResourceError(f"more than {max_paths} paths")
            continue
        probs = q.action_probs(kernel, x)
        for a in np.flatnonzero(probs):
            stack.append((kernel.step(x, int(a)), acts + (int(a),), p * probs[a]))
    return out


def doob_path_law(doob: DoobPolicy, start: ProverState = None, max_paths: int = 10_000) -> dict:
    """Exact law of Doob rollouts over action sequences."""
    kernel = doob.kernel
    L = doob.h.L
    start = kernel.initial_state() if start is None else start
    law = {}
    stack = [(start, (), 1.0)]
    while stack:
        x, acts, p = stack.pop()
        if not x.is_open or len(acts) == L:
            law[acts] = law.get(acts, 0.0) + p
            if len(law) > max_paths:
                raise ResourceError(f"more than {max_paths} paths")
            continue
        probs = doob.probs(x, L - len(acts))
        for a in np.flatnonzero(probs):
            stack.append((kernel.step(x, int(a)), acts + (int(a),), p * probs[a]))
    return law


def conditional_path_law(q, kernel, L: int, start: ProverState = None,
                         max_paths: int = 10_000) -> dict:
    """Law of q-paths conditioned on ending in Success, by enumeration."""
    paths = enumerate_paths(q, kernel, L, start, max_paths)
    good = {acts: p for acts, p, x in paths if x.is_success}
    total = sum(good.values())
    if total == 0:
        raise NullEventError("no successful path within the horizon")
    return {acts: p / total for acts, p in good.items()}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


# ---------------------------------------------------------------------------
# twists

class ExactTwist:
    def __init__(self, h: SuccessToGo):
        self.h = h

    def __call__(self, x, r):
        return self.h(x, r)


class ConstantTwist:
    def __call__(self, x, r):
        return 1.0


class TruncatedTwist:
    """h computed with at most ``depth`` steps of lookahead, floored at ``eps``."""

    def __init__(self, q, kernel, depth: int, eps: float = 1e-3):
        self.depth = depth
        self.eps = eps
        self.h = SuccessToGo(q, kernel, depth)

    def __call__(self, x, r):
        if x.is_success:
            return 1.0
        if x.is_failure:
            return 0.0
        return self.eps + (1 - self.eps) * self.h(x, min(r, self.depth))


@dataclass
class SMCResult:
    trace: Optional[Trace]
    survived: bool
    log_evidence: float
    ess: list = field(default_factory=list)
    logw_var: list = field(default_factory=list)
    resampled: list = field(default_factory=list)
    ancestors: list = field(default_factory=list, repr=False)


def _ess(logw: np.ndarray) -> float:
    fin = logw[np.isfinite(logw)]
    if fin.size == 0:
        return 0.0
    w = np.exp(fin - fin.max())
    return float(w.sum() ** 2 / (w ** 2).sum())


def twisted_smc(q, kernel, hhat, L: int, N: int, ess_frac: float = 0.5,
                rng: np.random.Generator = None, start: ProverState = None) -> SMCResult:
    """Twisted SMC for L-step successful traces with ancestor tracing.

    Proposals are q~_r(a|x) proportional to q(a|x) hhat(F(x,a), r-1).  The
    incremental weight is (q/q~) * hhat(x', r-1) / hhat(x, r), which equals
    1 for every particle when hhat is the exact success-to-go.  Particles
    hitting Failure get weight 0; at t = L weights are multiplied by
    1{x in G} / hhat(x, 0).  ``log_evidence`` estimates log h_L(start).
    """
    if N < 2:
        raise ContractError("need at least two particles")
    rng = np.random.default_rng() if rng is None else rng
    start = kernel.initial_state() if start is None else start
    h0 = hhat(start, L)
    if h0 <= 0:
        raise ContractError("twist must be positive at the start state")
    xs = [start] * N
    logw = np.full(N, -math.log(N))
    hist_actions: list = []
    hist_from: list = []
    cur = np.arange(N)
    res = SMCResult(None, False, -math.inf)
    log_z = math.log(h0)
    for t in range(L):
        r = L - t
        new_xs, acts, inc = [], [], np.zeros(N)
        for i, x in enumerate(xs):
            if not x.is_open or not np.isfinite(logw[i]):
                new_xs.append(x)
                acts.append(-1)
                continue
            qa = q.action_probs(kernel, x)
            children = [kernel.step(x, a) if qa[a] > 0 else None for a in range(len(qa))]
            tw = np.array([hhat(c, r - 1) if c is not None else 0.0 for c in children])
            if np.any(tw < 0):
                raise ContractError("twist must be nonnegative")
            prop = qa * tw
            mass = prop.sum()
            hx = hhat(x, r)
            if mass <= 0 or hx <= 0:
                new_xs.append(x)
                acts.append(-1)
                inc[i] = -math.inf
                continue
            a = _sample(prop / mass, rng)
            y = children[a]
            # (q / q~) * hhat(y, r-1) / hhat(x, r) simplifies to mass / hhat(x, r)
            inc[i] = -math.inf if y.is_failure else math.log(mass) - math.log(hx)
            new_xs.append(y)
            acts.append(a)
        hist_actions.append(acts)
        hist_from.append(cur.copy())
        xs = new_xs
        logw, lse = _reweight(logw, inc)
        fin = logw[np.isfinite(logw)]
        res.logw_var.append(float(np.var(fin)) if fin.size else math.nan)
        res.ess.append(_ess(logw))
        if not np.isfinite(lse):
            return res
        log_z += lse
        if res.ess[-1] < ess_frac * N:
            idx = rng.choice(N, size=N, p=np.exp(logw))
            xs = [xs[j] for j in idx]
            logw = np.full(N, -math.log(N))
            cur = idx
            res.resampled.append(t)
            res.ancestors.append(idx)
        else:
            cur = np.arange(N)
    final = np.array([-math.log(hhat(x, 0)) if x.is_success else -math.inf for x in xs])
    logw, lse = _reweight(logw, final)
    if not np.isfinite(lse):
        return res
    res.log_evidence = log_z + lse
    pick = int(rng.choice(N, p=np.exp(logw)))
    pos = int(cur[pick])
    actions = []
    for t in range(L - 1, -1, -1):
        actions.append(hist_actions[t][pos])
        pos = int(hist_from[t][pos])
    records = []
    x = start
    for t, a in enumerate(reversed(actions)):
        if a < 0:
            continue
        records.append(_record(kernel, x, t, a))
        x = kernel.step(x, a)
    res.trace = Trace(records, x.status, start.canonical_key())
    res.survived = True
    return res


def _reweight(logw: np.ndarray, inc: np.ndarray):
    """Add increments and renormalize; returns (new log-weights, log normalizer)."""
    new = logw + inc
    if not np.isfinite(new).any():
        return new, -math.inf
    lse = float(logsumexp(new[np.isfinite(new)]))
    return new - lse, lse
