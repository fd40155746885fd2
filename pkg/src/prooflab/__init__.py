"""Prover MDPs, proof-DAG generators and imitation-learning experiments."""
__version__ = "0.1.0"

from .blmetric import DiscreteMeasure, MetricSpace, d_bl, d_bl_lp
from .cutelim import ProofTree, decision_counts, unfold
from .dag import GenParams, ProofDag, make_conditionals, sample_dag, suff_stats
from .errors import ContractError, NullEventError, ParameterError, ResourceError
from .learners import (DecisionDataset, ERMPolicy, LatentEM, StructureEstimator, erm_fit,
                       estimate_structure, mixture_kl)
from .mdp import DagKernel, ProverState, TableKernel, reach_value_exact, rollout
from .policy import TabularPolicy, floor_project
from .samplers import doob_policy, success_to_go, twisted_smc
from .search import TopKConfig, backtracking_search, coverage_event, margin_audit

__all__ = [
    "ContractError", "DagKernel", "DecisionDataset", "DiscreteMeasure", "ERMPolicy", "GenParams",
    "LatentEM", "MetricSpace", "NullEventError", "ParameterError", "ProofDag", "ProofTree",
    "ProverState", "ResourceError", "StructureEstimator", "TableKernel", "TabularPolicy",
    "TopKConfig", "backtracking_search", "coverage_event", "d_bl", "d_bl_lp", "decision_counts",
    "doob_policy", "erm_fit", "estimate_structure", "floor_project", "make_conditionals",
    "margin_audit", "mixture_kl", "reach_value_exact", "rollout", "sample_dag", "success_to_go",
    "suff_stats", "twisted_smc", "unfold",
]
