import numpy as np
import pytest

from conftest import generated
from prooflab import io
from prooflab.cutelim import unfold
from prooflab.errors import ContractError
from prooflab.learners import DecisionDataset
from prooflab.mdp import rollout
from prooflab.policy import TabularPolicy


def test_dag_and_tree_round_trip():
    for seed in range(5):
        z, _, _ = generated(D=3, seed=seed)
        text = io.dump_dag(z)
        assert io.load_dag(text) == z
        assert io.dump_dag(io.load_dag(text)) == text
        tree = unfold(z)
        back = io.load_tree(io.dump_tree(tree))
        assert (back.uid, back.depth, back.children, back.root) == \
            (tree.uid, tree.depth, tree.children, tree.root)


def test_trace_round_trip():
    z, q, kernel = generated(D=2, seed=1)
    rng = np.random.default_rng(0)
    traces = [rollout(kernel, q, 200, rng=rng) for _ in range(5)]
    assert io.load_traces(io.dump_traces(traces)) == traces


def test_policy_round_trip_is_bit_exact():
    rng = np.random.default_rng(2)
    table = {f"dec:{i}:0": rng.dirichlet(np.ones(4)) for i in range(10)}
    pol = TabularPolicy(table, 4, 0.0123456789)
    back = io.load_policy(io.dump_policy(pol))
    assert back.M == 4 and back.rho == pol.rho and back.keying == pol.keying
    for key, p in table.items():
        assert np.array_equal(back.table[key], p)


def test_dataset_round_trip():
    data = DecisionDataset()
    data.add("dec:1:0", 2, "dec", 0, 0.1 + 0.2)
    data.add("sol:4:3", 0, "sol", 7, 1.0)
    back = io.load_dataset(io.dump_dataset(data))
    assert back == data


@pytest.mark.parametrize("loader,text", [
    (io.load_dag, "# prooflab-dag v2\ndag M=3 root=0\n"),
    (io.load_dag, "# prooflab-dag v1\nnode 0 0\n"),
    (io.load_dag, "# prooflab-dag v1\nnode 0 0 0 0 0\n"),
    (io.load_tree, "occ 0 0 0\n"),
    (io.load_tree, "# prooflab-tree v1\nocc 1 0 0\n"),
    (io.load_traces, "# prooflab-trace v1\nstep 0 x y 1 dec\n"),
    (io.load_policy, "# prooflab-policy v1\nclass a 0.5 0.5\n"),
    (io.load_dataset, "# prooflab-dataset v1\nrec a 1\n"),
    (io.load_dataset, ""),
])
def test_malformed_input_is_rejected(loader, text):
    with pytest.raises(ContractError):
        loader(text)
