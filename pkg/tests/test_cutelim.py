import numpy as np
import pytest

from prooflab.cutelim import decision_counts, recanonicalize, unfold
from prooflab.dag import GenParams, path_multiplicity, sample_dag
from prooflab.errors import ResourceError


def dag(D, b, r, seed=0, **kw):
    return sample_dag(GenParams(D=D, b_eff=b, r=r, **kw), np.random.default_rng(seed))


def brute_unfold_sizes(z):
    """Occurrences per depth by recursive expansion."""
    sizes = [0] * (z.D + 1)

    def visit(u):
        sizes[z.nodes[u].depth] += 1
        for c in z.children[u]:
            visit(c)

    visit(z.root)
    return tuple(sizes)


def test_tree_dag_unfolds_to_itself():
    z = dag(3, 2, 1)
    tree = unfold(z)
    assert len(tree) == len(z.nodes)
    assert sorted(tree.uid) == [n.uid for n in z.nodes]


def test_uniform_example_occurrences():
    z = dag(2, 2, 2)
    dc = decision_counts(z, unfold(z))
    assert dc.occ_by_depth == (1, 4, 16) == brute_unfold_sizes(z)


def test_occurrences_equal_path_multiplicity():
    z = dag(3, 2, 2, seed=5)
    assert unfold(z).occurrences_of() == path_multiplicity(z)


def test_tree_is_preorder_with_single_parents():
    z = dag(3, 2, 2, seed=1)
    tree = unfold(z)
    parent = {}
    for p, kids in enumerate(tree.children):
        for c in kids:
            assert c not in parent and c > p
            parent[c] = p
    assert set(parent) == set(range(1, len(tree)))


def test_depth_three_counts():
    z = dag(3, 2, 2)
    tree = unfold(z)
    dc = decision_counts(z, tree)
    assert dc.N_dec == 1 + 2 + 4
    flat_dec = sum(1 for u in tree.uid if not z.nodes[u].terminal)
    assert flat_dec == 1 + 4 + 16
    assert dc.N_flat == 21 + 64
    assert dc.N_hier == 7 + 8


def test_no_sharing_means_equal_counts():
    z = dag(3, 2, 1, K0=16.0)
    dc = decision_counts(z, unfold(z))
    assert dc.N_flat == dc.N_hier


def test_ratio_grows_by_about_r_per_depth():
    ratios = []
    for D in (1, 2, 3, 4):
        z = dag(D, 2, 2)
        ratios.append(decision_counts(z, unfold(z)).ratio)
    steps = [b / a for a, b in zip(ratios, ratios[1:])]
    assert all(1.5 <= s <= 2.0 for s in steps)
    assert steps == sorted(steps)


def test_flat_count_lower_bound():
    for D in (1, 2, 3, 4):
        z = dag(D, 2, 2)
        dc = decision_counts(z, unfold(z))
        assert dc.N_flat >= dc.N_hier
        assert dc.N_flat >= (2 * 2) ** (D - 1)


def test_recanonicalize_recovers_dag():
    z = dag(3, 2, 2, seed=2)
    uids, edges = recanonicalize(unfold(z))
    assert uids == [n.uid for n in z.nodes]
    assert edges == z.edges


def test_unfold_cap():
    z = dag(3, 2, 2)
    with pytest.raises(ResourceError):
        unfold(z, cap=50)
