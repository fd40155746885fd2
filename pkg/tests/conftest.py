import itertools

import numpy as np
import pytest

from prooflab.dag import DagNode, GenParams, ProofDag, make_conditionals, sample_dag
from prooflab.mdp import DagKernel, TableKernel
from prooflab.policy import TabularPolicy

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def chain_dag(L: int = 5, M: int = 3) -> ProofDag:
    """Root -> one decomposition node -> one terminal with L solver steps."""
    nodes = [DagNode(0, 0, False, 0, (0,)), DagNode(1, 1, False, 0, (1,)),
             DagNode(2, 2, True, L, tuple(i % M for i in range(L)))]
    return ProofDag(nodes, [(0, 1), (1, 2)], M)


def generated(D=2, b_eff=2, r=2, M=3, rho=0.05, beta=1.0, seed=0, stall=False, mode="hier",
              **kw):
    """(dag, conditionals, kernel) for a seeded generator draw."""
    params = GenParams(D=D, b_eff=b_eff, r=r, M=M, rho=rho, beta=beta, **kw)
    rng = np.random.default_rng(seed)
    z = sample_dag(params, rng)
    q = make_conditionals(z, params, rng)
    return z, q, DagKernel(z, mode, stall=stall)


def random_table_kernel(rng, n_states=4, M=3, p_goal=0.3, p_fail=0.2):
    """Random kernel over integer states; every state can also loop to itself."""
    trans = {}
    for s in range(n_states):
        for a in range(M):
            u = rng.random()
            if u < p_goal:
                trans[(s, a)] = "G"
            elif u < p_goal + p_fail:
                continue
            else:
                trans[(s, a)] = int(rng.integers(n_states))
    return TableKernel(trans, M)


def random_table_policy(rng, n_states, M, rho=0.0):
    table = {f"sol:{s}:0": rng.dirichlet(np.ones(M)) * (1 - M * rho) + rho for s in range(n_states)}
    return TabularPolicy(table, M, rho)


def brute_force_value(kernel, policy, horizon, start=None):
    """Sum over every action sequence of its probability times the success indicator."""
    start = kernel.initial_state() if start is None else start
    total = 0.0
    for seq in itertools.product(range(kernel.M), repeat=horizon):
        x, p = start, 1.0
        for a in seq:
            if not x.is_open:
                # spread the finished path evenly over the unused suffixes
                p /= kernel.M
                continue
            p *= policy.action_probs(kernel, x)[a]
            x = kernel.step(x, a)
        if x.is_success:
            total += p
    return total
