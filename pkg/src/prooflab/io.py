"""Line-oriented text formats for DAGs, trees, traces, policies and datasets.

Every file starts with a versioned header line.  Floats are written with
``repr`` so that parse(format(x)) reproduces x bit for bit.
"""
from __future__ import annotations

import numpy as np

from .cutelim import ProofTree
from .dag import DagNode, ProofDag
from .errors import ContractError
from .learners import DecisionDataset
from .mdp import DecisionRecord, Trace
from .policy import TabularPolicy

DAG_HEADER = "# prooflab-dag v1"
TREE_HEADER = "# prooflab-tree v1"
TRACE_HEADER = "# prooflab-trace v1"
POLICY_HEADER = "# prooflab-policy v1"
DATASET_HEADER = "# prooflab-dataset v1"


def _lines(text: str, header: str) -> list:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != header:
        raise ContractError(f"expected header {header!r}")
    return [ln.split() for ln in lines[1:]]


def _kv(fields) -> dict:
    out = {}
    for f in fields:
        k, _, v = f.partition("=")
        out[k] = v
    return out


def dump_dag(z: ProofDag) -> str:
    out = [DAG_HEADER, f"dag M={z.M} root={z.root}"]
    for n in z.nodes:
        acts = ",".join(str(a) for a in n.actions)
        out.append(f"node {n.uid} {n.depth} {int(n.terminal)} {n.length} {acts}")
    out.extend(f"edge {p} {c}" for p, c in z.edges)
    return "\n".join(out) + "\n"


def load_dag(text: str) -> ProofDag:
    nodes, edges, meta = [], [], None
    for f in _lines(text, DAG_HEADER):
        if f[0] == "dag":
            meta = _kv(f[1:])
        elif f[0] == "node" and len(f) == 6:
            nodes.append(DagNode(int(f[1]), int(f[2]), f[3] == "1", int(f[4]),
                                 tuple(int(a) for a in f[5].split(","))))
        elif f[0] == "edge" and len(f) == 3:
            edges.append((int(f[1]), int(f[2])))
        else:
            raise ContractError(f"malformed DAG line: {' '.join(f)}")
    if meta is None:
        raise ContractError("missing dag line")
    return ProofDag(nodes, edges, int(meta["M"]), int(meta["root"]))


def dump_tree(tree: ProofTree) -> str:
    out = [TREE_HEADER, f"tree root={tree.root}"]
    out.extend(f"occ {i} {u} {d}" for i, (u, d) in enumerate(zip(tree.uid, tree.depth)))
    for p, kids in enumerate(tree.children):
        out.extend(f"child {p} {c}" for c in kids)
    return "\n".join(out) + "\n"


def load_tree(text: str) -> ProofTree:
    uid, depth, links, root = [], [], [], 0
    for f in _lines(text, TREE_HEADER):
        if f[0] == "tree":
            root = int(_kv(f[1:])["root"])
        elif f[0] == "occ" and len(f) == 4:
            if int(f[1]) != len(uid):
                raise ContractError("occurrence ids must be consecutive")
            uid.append(int(f[2]))
            depth.append(int(f[3]))
        elif f[0] == "child" and len(f) == 3:
            links.append((int(f[1]), int(f[2])))
        else:
            raise ContractError(f"malformed tree line: {' '.join(f)}")
    children = [[] for _ in uid]
    for p, c in links:
        children[p].append(c)
    return ProofTree(uid, depth, children, root)


def dump_traces(traces) -> str:
    out = [TRACE_HEADER]
    for tr in traces:
        out.append(f"trace status={tr.status} start={tr.start_key or '-'} n={len(tr.records)}")
        out.extend(f"step {r.t} {r.state_key} {r.cand_id} {r.choice} {r.dtype}" for r in tr.records)
    return "\n".join(out) + "\n"


def load_traces(text: str) -> list:
    traces = []
    for f in _lines(text, TRACE_HEADER):
        if f[0] == "trace":
            kv = _kv(f[1:])
            start = "" if kv["start"] == "-" else kv["start"]
            traces.append(Trace([], kv["status"], start))
        elif f[0] == "step" and len(f) == 6 and traces:
            traces[-1].records.append(DecisionRecord(int(f[1]), f[2], f[3], int(f[4]), f[5]))
        else:
            raise ContractError(f"malformed trace line: {' '.join(f)}")
    return traces


def dump_policy(policy: TabularPolicy) -> str:
    out = [POLICY_HEADER, f"policy M={policy.M} rho={policy.rho!r} keying={policy.keying}"]
    for key in sorted(policy.table):
        out.append("class " + key + " " + " ".join(repr(float(p)) for p in policy.table[key]))
    return "\n".join(out) + "\n"


def load_policy(text: str) -> TabularPolicy:
    table, meta = {}, None
    for f in _lines(text, POLICY_HEADER):
        if f[0] == "policy":
            meta = _kv(f[1:])
        elif f[0] == "class":
            table[f[1]] = np.array([float(x) for x in f[2:]])
        else:
            raise ContractError(f"malformed policy line: {' '.join(f)}")
    if meta is None:
        raise ContractError("missing policy line")
    M = int(meta["M"])
    return TabularPolicy(table, M, float(meta["rho"]), meta["keying"], np.full(M, 1.0 / M))


def dump_dataset(data: DecisionDataset) -> str:
    out = [DATASET_HEADER]
    for k, c, d, t, w in zip(data.keys, data.choices, data.dtypes, data.trace_ids, data.weights):
        out.append(f"rec {k} {c} {d} {t} {w!r}")
    return "\n".join(out) + "\n"


def load_dataset(text: str) -> DecisionDataset:
    data = DecisionDataset()
    for f in _lines(text, DATASET_HEADER):
        if f[0] != "rec" or len(f) != 6:
            raise ContractError(f"malformed dataset line: {' '.join(f)}")
        data.add(f[1], int(f[2]), f[3], int(f[4]), float(f[5]))
    return data
