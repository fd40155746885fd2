"""Deterministic finite-horizon proof MDP.

A state is a sorted multiset of open goals (or one of the two sinks).  The
agent always acts on the first goal in canonical order, so a state together
with a choice index fully determines the next state.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ContractError, ResourceError

OPEN, SUCCESS, FAILURE = "open", "success", "failure"
DEFAULT_STATE_CAP = 1_000_000

DECOMPOSE, SOLVER_STEP, FLAT_STEP = "Decompose", "SolverStep", "FlatStep"


@dataclass(frozen=True, order=True)
class GoalToken:
    """One open goal.

    ``remaining`` is the number of solver steps still owed by a terminal goal
    (0 for goals that still need a decomposition).  ``occurrence`` tells apart
    tree copies of the same unique subgoal; it is -1 when sharing is kept.
    """

    uid: int
    depth: int
    remaining: int = 0
    occurrence: int = -1


@dataclass(frozen=True)
class ProverState:
    goals: tuple = ()
    status: str = OPEN
    seen: frozenset = field(default=frozenset())

    @classmethod
    def of(cls, goals, seen=frozenset()) -> "ProverState":
        goals = tuple(sorted(goals))
        if not goals:
            return SUCCESS_STATE
        return cls(goals, OPEN, frozenset(seen))

    @property
    def is_open(self) -> bool:
        return self.status == OPEN

    @property
    def is_success(self) -> bool:
        return self.status == SUCCESS

    @property
    def is_failure(self) -> bool:
        return self.status == FAILURE

    @property
    def focus(self) -> GoalToken:
        if not self.goals:
            raise ContractError("terminal state has no focus goal")
        return self.goals[0]

    def canonical_key(self) -> str:
        """Sorted (uid, depth, remaining) triples; occurrence ids are dropped."""
        if self.status == SUCCESS:
            return "S"
        if self.status == FAILURE:
            return "F"
        body = ",".join(f"{g.uid}.{g.depth}.{g.remaining}" for g in self.goals)
        if self.seen:
            body += ";" + ",".join(str(u) for u in sorted(self.seen))
        return body


SUCCESS_STATE = ProverState((), SUCCESS)
FAILURE_STATE = ProverState((), FAILURE)


@dataclass(frozen=True)
class DecisionPoint:
    """The decision the agent faces at an open state."""

    kind: str  # "dec" or "sol"
    uid: int
    step: int
    occurrence: int = -1
    mode: str = "hier"

    @property
    def key(self) -> str:
        return f"{self.kind}:{self.uid}:{self.step}"

    @property
    def occurrence_key(self) -> str:
        return f"{self.kind}@{self.occurrence}:{self.step}"

    @property
    def dtype(self) -> str:
        return "flat" if self.mode == "flat" else self.kind


@dataclass(frozen=True)
class ActionId:
    kind: str
    target: GoalToken
    choice: int


@dataclass(frozen=True)
class DecisionRecord:
    t: int
    state_key: str
    cand_id: str
    choice: int
    dtype: str


@dataclass
class Trace:
    records: list
    status: str
    start_key: str = ""

    @property
    def success(self) -> bool:
        return self.status == SUCCESS

    def __len__(self):
        return len(self.records)


class Kernel:
    """Base class for goal-level deterministic kernels.

    Subclasses implement ``decision_point``, ``expand`` and optionally
    ``is_stall``.  ``expand`` returns the goals replacing the focus goal, or
    None when the verifier rejects the choice.
    """

    M: int = 2
    horizon: int = 0
    mode: str = "hier"

    def initial_state(self) -> ProverState:
        raise NotImplementedError

    def decision_point(self, state: ProverState) -> DecisionPoint:
        raise NotImplementedError

    def expand(self, token: GoalToken, choice: int):
        raise NotImplementedError

    def is_stall(self, token: GoalToken, choice: int) -> bool:
        return False

    def num_candidates(self, state: ProverState) -> int:
        return self.M

    def action_id(self, state: ProverState, choice: int) -> ActionId:
        dp = self.decision_point(state)
        if self.mode == "flat":
            kind = FLAT_STEP
        else:
            kind = DECOMPOSE if dp.kind == "dec" else SOLVER_STEP
        return ActionId(kind, state.focus, choice)

    def step(self, state: ProverState, choice: int) -> ProverState:
        if not state.is_open:
            return state
        if not 0 <= choice < self.num_candidates(state):
            raise ContractError(f"choice {choice} out of range for M={self.M}")
        token = state.goals[0]
        if self.is_stall(token, choice):
            return state
        new = self.expand(token, choice)
        if new is None:
            return FAILURE_STATE
        seen = state.seen
        if self.mode == "hier" and new and token.remaining == 0:
            fresh = []
            for g in new:
                if g.uid not in seen:
                    seen = seen | {g.uid}
                    fresh.append(g)
            new = fresh
        return ProverState.of(state.goals[1:] + tuple(new), seen)

    def valid_choices(self, state: ProverState) -> list:
        return [a for a in range(self.num_candidates(state))
                if not self.step(state, a).is_failure]


def step(kernel: Kernel, state: ProverState, action: ActionId) -> ProverState:
    """Apply ``action`` to ``state``; invalid choices lead to Failure."""
    if not state.is_open:
        return state
    if not 0 <= action.choice < kernel.num_candidates(state):
        raise ContractError(f"choice {action.choice} out of range")
    if action.target != state.focus:
        raise ContractError("action target is not the focus goal")
    return kernel.step(state, action.choice)


class TableKernel(Kernel):
    """Hand-specified kernel over integer states.

    ``transitions[(s, a)]`` is an integer state, ``"G"`` for success or
    ``"F"`` for failure; missing pairs are failures.
    """

    def __init__(self, transitions: dict, M: int, start: int = 0, horizon: int = 0):
        self.transitions = dict(transitions)
        self.M = M
        self.start = start
        self.horizon = horizon
        self.mode = "hier"

    def initial_state(self):
        return ProverState.of([GoalToken(self.start, 0)])

    def decision_point(self, state):
        return DecisionPoint("sol", state.focus.uid, 0)

    def expand(self, token, choice):
        nxt = self.transitions.get((token.uid, choice), "F")
        if nxt == "F":
            return None
        if nxt == "G":
            return []
        return [GoalToken(int(nxt), 0)]

    def step(self, state, choice):
        # each state is a single goal, so no sharing bookkeeping is needed
        if not state.is_open:
            return state
        if not 0 <= choice < self.M:
            raise ContractError(f"choice {choice} out of range for M={self.M}")
        new = self.expand(state.focus, choice)
        if new is None:
            return FAILURE_STATE
        return ProverState.of(new)


class DagKernel(Kernel):
    """Environment induced by a proof DAG.

    In ``hier`` mode every unique subgoal is handled once (later references
    to an already introduced uid are dropped).  In ``flat`` mode the kernel
    walks the cut-free tree, so every occurrence is proved separately.
    With ``stall=True`` the candidate just after the reference action is a
    valid no-op, which gives the path space some width.
    """

    def __init__(self, dag, mode: str = "hier", stall: bool = False,
                 horizon: Optional[int] = None, tree=None):
        if mode not in ("hier", "flat"):
            raise ContractError(f"unknown mode {mode!r}")
        self.dag = dag
        self.mode = mode
        self.stall = stall
        self.M = dag.M
        self.tree = None
        if mode == "flat":
            from .cutelim import unfold
            self.tree = tree if tree is not None else unfold(dag)
        self.horizon = horizon if horizon is not None else 0

    def _token(self, uid: int, occurrence: int = -1) -> GoalToken:
        node = self.dag.nodes[uid]
        rem = node.length if node.terminal else 0
        return GoalToken(uid, node.depth, rem, occurrence)

    def initial_state(self):
        root = self.dag.root
        if self.mode == "flat":
            return ProverState.of([self._token(root, self.tree.root)])
        return ProverState.of([self._token(root)], frozenset([root]))

    def decision_point(self, state):
        g = state.focus
        node = self.dag.nodes[g.uid]
        if node.terminal:
            return DecisionPoint("sol", g.uid, node.length - g.remaining, g.occurrence, self.mode)
        return DecisionPoint("dec", g.uid, 0, g.occurrence, self.mode)

    def reference_choice(self, token: GoalToken) -> int:
        node = self.dag.nodes[token.uid]
        if node.terminal:
            return node.actions[node.length - token.remaining]
        return node.actions[0]

    def is_stall(self, token, choice):
        return self.stall and choice == (self.reference_choice(token) + 1) % self.M

    def expand(self, token, choice):
        if choice != self.reference_choice(token):
            return None
        node = self.dag.nodes[token.uid]
        if node.terminal:
            if token.remaining <= 1:
                return []
            return [replace(token, remaining=token.remaining - 1)]
        if self.mode == "flat":
            return [self._token(self.tree.uid[c], c) for c in self.tree.children[token.occurrence]]
        return [self._token(c) for c in self.dag.children[token.uid]]


def _check_cap(n: int, cap: int):
    if n > cap:
        raise ResourceError(f"reachable state set exceeds cap {cap}")


def bellman_table(kernel: Kernel, policy, horizon: int, start: ProverState = None,
                  cap: int = DEFAULT_STATE_CAP) -> dict:
    """All values V_t(x) for states reachable from ``start`` within ``horizon``.

    Returns a dict keyed by (state, t).
    """
    start = kernel.initial_state() if start is None else start
    table: dict = {}
    states: set = set()

    def value(x: ProverState, t: int) -> float:
        hit = table.get((x, t))
        if hit is not None:
            return hit
        if x not in states:
            states.add(x)
            _check_cap(len(states), cap)
        if x.is_success:
            v = 1.0
        elif x.is_failure or t == 0:
            v = 0.0
        else:
            probs = policy.action_probs(kernel, x)
            v = 0.0
            for a in np.flatnonzero(probs):
                v += probs[a] * value(kernel.step(x, int(a)), t - 1)
        table[(x, t)] = v
        return v

    value(start, horizon)
    return table


def reach_value_exact(kernel: Kernel, policy, horizon: int, start: ProverState = None,
                      cap: int = DEFAULT_STATE_CAP) -> float:
    """Probability that ``policy`` reaches Success within ``horizon`` steps."""
    start = kernel.initial_state() if start is None else start
    return bellman_table(kernel, policy, horizon, start, cap)[(start, horizon)]


def _explore(kernel: Kernel, start: ProverState, depth: int, cap: int):
    """BFS over valid transitions up to ``depth`` steps; returns successor map."""
    succ = {}
    frontier = deque([(start, 0)])
    seen = {start}
    while frontier:
        x, d = frontier.popleft()
        if not x.is_open or d >= depth:
            continue
        nxt = {}
        for a in range(kernel.num_candidates(x)):
            y = kernel.step(x, a)
            if y.is_failure:
                continue
            nxt[a] = y
            if y not in seen:
                seen.add(y)
                _check_cap(len(seen), cap)
                frontier.append((y, d + 1))
        succ[x] = nxt
    return succ


def min_proof_length(kernel: Kernel, start: ProverState = None, cap: int = 10_000,
                     state_cap: int = DEFAULT_STATE_CAP):
    """Fewest steps from ``start`` to Success, or ``math.inf`` beyond ``cap``."""
    if cap < 0:
        raise ContractError("cap must be nonnegative")
    start = kernel.initial_state() if start is None else start
    if start.is_success:
        return 0
    if start.is_failure:
        return math.inf
    frontier = deque([(start, 0)])
    seen = {start}
    while frontier:
        x, d = frontier.popleft()
        if d >= cap:
            continue
        for a in range(kernel.num_candidates(x)):
            y = kernel.step(x, a)
            if y.is_success:
                return d + 1
            if y.is_open and y not in seen:
                seen.add(y)
                _check_cap(len(seen), state_cap)
                frontier.append((y, d + 1))
    return math.inf


class DeterministicPolicy:
    """Maps each state to a single choice."""

    def __init__(self, choices: dict, M: int, default: int = 0):
        self.choices = choices
        self.M = M
        self.default = default

    def action_probs(self, kernel, state):
        p = np.zeros(self.M)
        p[self.choices.get(state, self.default)] = 1.0
        return p


def optimal_policy(kernel: Kernel, start: ProverState = None, cap: int = 10_000,
                   state_cap: int = DEFAULT_STATE_CAP) -> DeterministicPolicy:
    """Deterministic policy following a shortest proof from every explored state."""
    start = kernel.initial_state() if start is None else start
    succ = _explore(kernel, start, cap, state_cap)
    # distance to success by relaxation over the explored graph
    dist = {SUCCESS_STATE: 0}
    changed = True
    while changed:
        changed = False
        for x, nxt in succ.items():
            best = min((dist.get(y, math.inf) for y in nxt.values()), default=math.inf)
            if best + 1 < dist.get(x, math.inf):
                dist[x] = best + 1
                changed = True
    choices = {}
    for x, nxt in succ.items():
        ranked = sorted(nxt.items(), key=lambda kv: (dist.get(kv[1], math.inf), kv[0]))
        if ranked:
            choices[x] = ranked[0][0]
    return DeterministicPolicy(choices, kernel.M)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    c = np.cumsum(probs)
    return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), len(probs) - 1))


def rollout(kernel: Kernel, policy, horizon: int, start: ProverState = None,
            rng: np.random.Generator = None) -> Trace:
    """Sample a trajectory of ``policy`` and record every decision point."""
    start = kernel.initial_state() if start is None else start
    rng = np.random.default_rng() if rng is None else rng
    x = start
    records = []
    for t in range(horizon):
        if not x.is_open:
            break
        try:
            probs = policy.action_probs(kernel, x)
        except KeyError as exc:
            raise ContractError(f"policy undefined at {x.canonical_key()}") from exc
        a = _sample(probs, rng)
        dp = kernel.decision_point(x)
        cand = dp.occurrence_key if dp.mode == "flat" else dp.key
        records.append(DecisionRecord(t, x.canonical_key(), cand, a, dp.dtype))
        x = kernel.step(x, a)
    return Trace(records, x.status, start.canonical_key())


def transition_table(kernel: Kernel, policy, horizon: int, start: ProverState = None,
                     cap: int = DEFAULT_STATE_CAP):
    """Index the states reachable under ``policy`` for vectorized simulation.

    Returns (states, next_index[S, M], cumprobs[S, M]); index 0 is ``start``.
    """
    start = kernel.initial_state() if start is None else start
    index = {start: 0}
    states = [start]
    nxt_rows, cum_rows = [], []
    i = 0
    while i < len(states):
        x = states[i]
        row = np.full(kernel.M, i, dtype=np.int64)
        cum = np.ones(kernel.M)
        if x.is_open:
            probs = policy.action_probs(kernel, x)
            cum = np.cumsum(probs)
            for a in range(kernel.M):
                if probs[a] == 0:
                    continue
                y = kernel.step(x, a)
                if y not in index:
                    index[y] = len(states)
                    states.append(y)
                    _check_cap(len(states), cap)
                row[a] = index[y]
        nxt_rows.append(row)
        cum_rows.append(cum)
        i += 1
    return states, np.array(nxt_rows), np.array(cum_rows)


def monte_carlo_success(kernel: Kernel, policy, horizon: int, n: int,
                        rng: np.random.Generator, start: ProverState = None) -> np.ndarray:
    """Success indicators of ``n`` independent rollouts, simulated in batch."""
    states, nxt, cum = transition_table(kernel, policy, horizon, start)
    done = np.array([s.is_success for s in states])
    cur = np.zeros(n, dtype=np.int64)
    for _ in range(horizon):
        u = rng.random(n) * cum[cur, -1]
        a = (cum[cur] <= u[:, None]).sum(axis=1)
        a = np.minimum(a, kernel.M - 1)
        cur = nxt[cur, a]
    return done[cur]
