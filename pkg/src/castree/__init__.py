"""Cost-aware speculative tree decoding on synthetic models."""

from castree.cost_model import CostPair, CostTable, build_table, load_table, save_table, select_bucket
from castree.draft_tree import DraftNode, DraftTree, LinearizedDraft, new_tree
from castree.selector import cumulative_utility, eagle_equivalence_check, max_valid_index
from castree.tree_builder import BuilderConfig, DepthBufferBank, ExpansionTrace, build_draft, rerank
from castree.verifier import VerifyResult, accept_token, residual, verify_chain, verify_tree

__all__ = [
    "BuilderConfig",
    "CostPair",
    "CostTable",
    "DepthBufferBank",
    "DraftNode",
    "DraftTree",
    "ExpansionTrace",
    "LinearizedDraft",
    "VerifyResult",
    "accept_token",
    "build_draft",
    "build_table",
    "cumulative_utility",
    "eagle_equivalence_check",
    "load_table",
    "max_valid_index",
    "new_tree",
    "rerank",
    "residual",
    "save_table",
    "select_bucket",
    "verify_chain",
    "verify_tree",
]

__version__ = "0.1.0"
