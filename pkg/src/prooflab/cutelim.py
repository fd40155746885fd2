"""Cut elimination: unfold a proof DAG into its cut-free tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dag import ProofDag, path_multiplicity
from .errors import ResourceError

DEFAULT_TREE_CAP = 10_000_000


@dataclass
class ProofTree:
    """Occurrences are numbered in depth-first preorder; the root is 0."""

    uid: list
    depth: list
    children: list
    root: int = 0

    def __len__(self):
        return len(self.uid)

    def occurrences_of(self) -> dict:
        counts: dict = {}
        for u in self.uid:
            counts[u] = counts.get(u, 0) + 1
        return counts


@dataclass(frozen=True)
class DecisionCounts:
    N_dec: int
    N_sol: int
    N_flat: int
    occ_by_depth: tuple

    @property
    def N_hier(self) -> int:
        return self.N_dec + self.N_sol

    @property
    def ratio(self) -> float:
        return self.N_flat / self.N_hier


def unfold(z: ProofDag, cap: int = DEFAULT_TREE_CAP) -> ProofTree:
    """Duplicate every shared node once per root-to-node path."""
    total = sum(path_multiplicity(z).values())
    if total > cap:
        raise ResourceError(f"unfolded tree would have {total} nodes (cap {cap})")
    uid, depth, children = [], [], []
    stack = [(z.root, -1)]
    while stack:
        u, parent = stack.pop()
        occ = len(uid)
        uid.append(u)
        depth.append(z.nodes[u].depth)
        children.append([])
        if parent >= 0:
            children[parent].append(occ)
        for c in reversed(z.children[u]):
            stack.append((c, occ))
    return ProofTree(uid, depth, children)


def decision_counts(z: ProofDag, tree: ProofTree) -> DecisionCounts:
    n_dec = sum(1 for n in z.nodes if not n.terminal)
    n_sol = sum(n.length for n in z.nodes if n.terminal)
    n_flat = 0
    occ = np.zeros(z.D + 1, dtype=np.int64)
    for u, d in zip(tree.uid, tree.depth):
        node = z.nodes[u]
        n_flat += node.length if node.terminal else 1
        occ[d] += 1
    return DecisionCounts(n_dec, n_sol, n_flat, tuple(int(x) for x in occ))


def recanonicalize(tree: ProofTree):
    """Merge occurrences with the same uid; returns (uids, edge multiset)."""
    edges = []
    for parent, kids in enumerate(tree.children):
        edges.extend((tree.uid[parent], tree.uid[c]) for c in kids)
    # each DAG edge appears once per occurrence of its parent
    occ = tree.occurrences_of()
    counts: dict = {}
    for e in edges:
        counts[e] = counts.get(e, 0) + 1
    merged = []
    for (p, c), n in sorted(counts.items()):
        merged.extend([(p, c)] * (n // occ[p]))
    return sorted(set(tree.uid)), merged
