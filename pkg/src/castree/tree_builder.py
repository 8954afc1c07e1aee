"""Cost-aware draft-tree construction.

A batch of trees is grown layer by layer.  Every retained node proposes its
top-K draft tokens; the batch then decides how many of the pooled candidates
each sample keeps (breadth pruning), whether another layer is worth drafting
(depth pruning), and finally how many of the best nodes go to the target
model (reranking).  All three decisions are batch-global so every sample's
tree has the same shape; the nodes themselves are per-sample.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from castree.cost_model import CostPair
from castree.draft_tree import ROOT, DraftTree, LinearizedDraft, new_tree
from castree.lm import LanguageModel
from castree.selector import max_valid_index, utility_curve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BuilderConfig:
    top_k: int = 12
    max_depth: int = 13
    max_verify: int = 72
    breadth_threshold: float = 2.5
    depth_threshold: float = 2.5
    rerank_threshold: float = 2.5
    buffer_size: int = 8
    enable_bp: bool = True
    enable_dp: bool = True
    enable_dr: bool = True
    # Only still-marked indices may reject later ones in the selector.
    marked_only: bool = False

    def __post_init__(self) -> None:
        for name in ("top_k", "max_depth", "max_verify", "buffer_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("breadth_threshold", "depth_threshold", "rerank_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def fixed_tree(cls, top_k: int, max_depth: int, max_verify: int) -> BuilderConfig:
        """All cost-aware components off: fixed top-K expansion and top-m rerank."""
        return cls(
            top_k=top_k,
            max_depth=max_depth,
            max_verify=max_verify,
            enable_bp=False,
            enable_dp=False,
            enable_dr=False,
        )


class DepthBufferBank:
    """Per-layer FIFO buffers of recent confidence-gain ratios."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buffers: dict[int, deque[float]] = {}

    def buffer(self, i: int) -> deque[float]:
        buf = self._buffers.get(i)
        if buf is None:
            buf = self._buffers[i] = deque([1.0], maxlen=self.capacity)
        return buf

    def alpha(self, i: int) -> float:
        buf = self.buffer(i)
        return sum(buf) / len(buf)

    def push(self, i: int, ratio: float) -> None:
        self.buffer(i).append(float(ratio))

    def snapshot(self) -> tuple[tuple[int, tuple[float, ...]], ...]:
        return tuple(sorted((i, tuple(b)) for i, b in self._buffers.items()))

    def restore(self, snapshot: tuple[tuple[int, tuple[float, ...]], ...]) -> None:
        self._buffers = {i: deque(vals, maxlen=self.capacity) for i, vals in snapshot}


@dataclass
class ExpansionTrace:
    context_length: int
    widths: list[int] = field(default_factory=list)
    utilities: list[float] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    pool_sizes: list[int] = field(default_factory=list)
    stop_reason: str = ""
    verify_count: int = 0

    @property
    def depth(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        return {
            "context_length": self.context_length,
            "widths": list(self.widths),
            "utilities": [float(x) for x in self.utilities],
            "costs": [float(x) for x in self.costs],
            "pool_sizes": list(self.pool_sizes),
            "stop_reason": self.stop_reason,
            "verify_count": self.verify_count,
        }


@dataclass
class DraftBatch:
    """Trees under construction plus the frontier of retained nodes."""

    trees: list[DraftTree]
    contexts: list[list[int]]
    frontier: list[list[int]]
    paths: list[dict[int, list[int]]]

    @property
    def context_length(self) -> int:
        return max(len(c) for c in self.contexts)


def start_batch(contexts: Sequence[Sequence[int]]) -> DraftBatch:
    if len(contexts) == 0:
        raise ValueError("empty batch")
    contexts = [list(c) for c in contexts]
    n0 = max(len(c) for c in contexts)
    return DraftBatch(
        trees=[new_tree(n0, j) for j in range(len(contexts))],
        contexts=contexts,
        frontier=[[ROOT] for _ in contexts],
        paths=[{ROOT: []} for _ in contexts],
    )


def _strictly_increasing(c: np.ndarray) -> np.ndarray:
    # Flat stretches of a cost row would divide by zero in the selector; an
    # infinitesimal ramp makes them read as free.
    c = np.maximum.accumulate(np.asarray(c, dtype=np.float64))
    return c + np.arange(1, len(c) + 1) * (1e-12 * c[0])


def _top_tokens(q: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-q, kind="stable")[:k]


def expand_layer(
    batch: DraftBatch,
    i: int,
    draft_model: LanguageModel,
    cfg: BuilderConfig,
    costs: CostPair,
    trace: ExpansionTrace,
) -> int:
    """Grow layer ``i`` of every tree and return the number of nodes retained."""
    if i != trace.depth + 1:
        raise ValueError(f"layer {i} requested but trace is at depth {trace.depth}")
    pools = []
    for tree, ctx, frontier, paths in zip(batch.trees, batch.contexts, batch.frontier, batch.paths):
        pool = []
        for parent in frontier:
            q = draft_model.next_distribution(ctx + paths[parent])
            base = tree.nodes[parent].value
            for t in _top_tokens(q, cfg.top_k):
                pool.append((base * float(q[t]), parent, int(t), float(q[t])))
        pool.sort(key=lambda cand: -cand[0])
        pools.append(pool)
    pool_size = min(len(p) for p in pools)
    if pool_size == 0:
        raise ValueError(f"empty candidate pool at layer {i}")

    limit = min(pool_size, costs.draft.max_tokens)
    values = [[cand[0] for cand in pool[:limit]] for pool in pools]
    u = utility_curve(values, limit)
    tree_context = sum(trace.widths)
    c = _strictly_increasing(costs.draft_curve(tree_context, limit))
    if cfg.enable_bp:
        n_i = max_valid_index(u, c, cfg.breadth_threshold, marked_only=cfg.marked_only)
    else:
        n_i = min(cfg.top_k, limit)

    for j, pool in enumerate(pools):
        tree, paths = batch.trees[j], batch.paths[j]
        kept = []
        for _, parent, token, prob in pool[:n_i]:
            (h,) = tree.add_children(parent, [token], [prob])
            paths[h] = paths[parent] + [token]
            kept.append(h)
        batch.frontier[j] = kept

    trace.widths.append(n_i)
    trace.utilities.append(float(u[n_i - 1]))
    trace.costs.append(float(c[n_i - 1]))
    trace.pool_sizes.append(pool_size)
    return n_i


def should_deepen(
    bank: DepthBufferBank, i: int, utility: float, cost: float, cfg: BuilderConfig
) -> bool:
    """Whether layer ``i + 1`` is worth drafting given layer ``i``'s utility and cost."""
    if not cfg.enable_dp:
        return True
    return bank.alpha(i) * utility / cost >= cfg.depth_threshold


def record_gain(bank: DepthBufferBank, i: int, u_next: float, u_curr: float) -> None:
    if u_curr <= 0:
        log.warning("layer %d has zero utility; confidence gain not recorded", i)
        return
    bank.push(i, u_next / u_curr)


def build_draft(
    contexts: Sequence[Sequence[int]],
    draft_model: LanguageModel,
    cfg: BuilderConfig,
    costs: CostPair,
    bank: DepthBufferBank,
) -> tuple[DraftBatch, ExpansionTrace]:
    batch = start_batch(contexts)
    trace = ExpansionTrace(context_length=batch.context_length)
    expand_layer(batch, 1, draft_model, cfg, costs, trace)
    i = 1
    while True:
        if i >= cfg.max_depth:
            trace.stop_reason = "max_depth"
            break
        if not should_deepen(bank, i, trace.utilities[-1], trace.costs[-1], cfg):
            trace.stop_reason = "depth_pruned"
            break
        expand_layer(batch, i + 1, draft_model, cfg, costs, trace)
        record_gain(bank, i, trace.utilities[i], trace.utilities[i - 1])
        i += 1
    return batch, trace


def ranked_nodes(tree: DraftTree) -> list[int]:
    """Drafted nodes by descending value, earlier creation first on ties."""
    return sorted(range(1, len(tree.nodes)), key=lambda h: -tree.nodes[h].value)


def rerank(
    batch: DraftBatch, trace: ExpansionTrace, cfg: BuilderConfig, costs: CostPair
) -> list[tuple[list[int], LinearizedDraft]]:
    """Pick the nodes each sample sends to the target model."""
    ranked = [ranked_nodes(tree) for tree in batch.trees]
    total = min(len(r) for r in ranked)
    n = min(total, cfg.max_verify)
    if cfg.enable_dr:
        values = [[tree.nodes[h].value for h in r[:n]] for tree, r in zip(batch.trees, ranked)]
        u = utility_curve(values, n)
        c = _strictly_increasing(costs.target_curve(trace.context_length, n))
        r_count = max_valid_index(u, c, cfg.rerank_threshold, marked_only=cfg.marked_only)
    else:
        r_count = n
    trace.verify_count = r_count
    out = []
    for tree, r in zip(batch.trees, ranked):
        selected = r[:r_count]
        out.append((selected, tree.linearize(selected)))
    return out


def build_fixed_tree(
    context: Sequence[int],
    draft_model: LanguageModel,
    top_k: int,
    depth: int,
    max_verify: int,
) -> tuple[DraftTree, list[int]]:
    """Fixed-shape baseline: keep the top-K nodes of every layer, verify the top ``max_verify``."""
    tree = new_tree(len(context))
    layer = [ROOT]
    for _ in range(depth):
        cands = []
        for parent in layer:
            q = draft_model.next_distribution(list(context) + tree.path_tokens(parent))
            order = np.argsort(-q, kind="stable")[:top_k]
            cands.extend((tree.nodes[parent].value * float(q[t]), parent, int(t), float(q[t])) for t in order)
        cands.sort(key=lambda x: -x[0])
        layer = [tree.add_children(p, [t], [prob])[0] for _, p, t, prob in cands[:top_k]]
    flat = sorted(range(1, len(tree.nodes)), key=lambda h: (-tree.nodes[h].value, h))
    return tree, flat[:max_verify]
