"""Draft/verify decode cycles with a cost-table clock."""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from castree.cost_model import CostPair
from castree.draft_tree import LinearizedDraft
from castree.lm import LanguageModel, tree_forward
from castree.tree_builder import (
    BuilderConfig,
    DepthBufferBank,
    ExpansionTrace,
    build_draft,
    build_fixed_tree,
    rerank,
)
from castree.verifier import sample_from, verify_chain, verify_tree

METHODS = ("vanilla", "chain-spd", "fixed-tree", "eagle2-style", "cast")
TREE_METHODS = ("fixed-tree", "eagle2-style", "cast")


@dataclass
class CycleOutcome:
    committed: list[list[int]]
    accept_lengths: list[int]
    cumulative_probs: list[float]
    expected_accepts: list[float]
    draft_ms: float
    target_ms: float
    overhead_ms: float
    trace: ExpansionTrace | None = None

    @property
    def total_ms(self) -> float:
        return self.draft_ms + self.target_ms + self.overhead_ms


@dataclass
class _TreePlan:
    drafts: list[LinearizedDraft]
    target_rows: list[np.ndarray]
    widths: list[int]
    verify_count: int
    trace: ExpansionTrace | None
    bank_after: tuple = ()
    expected: list[float] = field(default_factory=list)


def expected_accept_length(linearized: LinearizedDraft, target_rows: np.ndarray) -> float:
    """Mean accept length of a deterministic-proposal tree: sum of target path probabilities."""
    reach = np.empty(len(linearized))
    for i, (tok, par) in enumerate(zip(linearized.tokens, linearized.parents)):
        reach[i] = target_rows[par + 1][tok] * (1.0 if par < 0 else reach[par])
    return float(reach.sum())


class SpeculativeDecoder:
    """Runs decode cycles for one method on a batch of contexts.

    Simulated charges per cycle: one draft call per drafted layer (the call
    that produces layer ``i`` feeds the ``n_{i-1}`` retained parents, one
    token for the first layer), one target call over the root plus the
    verified nodes, and a fixed overhead.
    """

    def __init__(
        self,
        method: str,
        target: LanguageModel,
        draft: LanguageModel,
        costs: CostPair,
        builder: BuilderConfig,
        *,
        greedy: bool = False,
        chain_length: int = 4,
        overhead_ms: float = 0.0,
        clock: str = "sim",
        memo_size: int = 4096,
    ):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        if clock not in ("sim", "wall"):
            raise ValueError(f"clock must be 'sim' or 'wall', got {clock!r}")
        if target.vocab_size != draft.vocab_size:
            raise ValueError("draft and target vocabularies differ")
        self.method = method
        self.target = target
        self.draft = draft
        self.costs = costs
        self.builder = builder
        self.greedy = greedy
        self.chain_length = chain_length
        self.overhead_ms = overhead_ms
        self.clock = clock
        self._memo: OrderedDict = OrderedDict()
        self._memo_size = memo_size if clock == "sim" else 0
        self._check_tables()

    def _check_tables(self) -> None:
        n_target = self.costs.target.max_tokens
        n_draft = self.costs.draft.max_tokens
        if self.method in TREE_METHODS:
            if self.builder.max_verify + 1 > n_target:
                raise ValueError(
                    f"target table covers {n_target} tokens but verification may need "
                    f"{self.builder.max_verify + 1}"
                )
            if self.builder.top_k > self.target.vocab_size:
                raise ValueError("top_k exceeds the vocabulary size")
            if self.builder.top_k > n_draft:
                raise ValueError(f"draft table covers {n_draft} tokens, fewer than top_k")
        if self.method == "chain-spd" and self.chain_length + 1 > n_target:
            raise ValueError(f"target table covers {n_target} tokens, chain needs {self.chain_length + 1}")

    def new_bank(self) -> DepthBufferBank:
        return DepthBufferBank(self.builder.buffer_size)

    def cycle(
        self, contexts: Sequence[Sequence[int]], bank: DepthBufferBank, rng: np.random.Generator
    ) -> CycleOutcome:
        start = time.perf_counter()
        if self.method == "vanilla":
            out = self._vanilla(contexts, rng)
        elif self.method == "chain-spd":
            out = self._chain(contexts, rng)
        else:
            out = self._tree(contexts, bank, rng)
        if self.clock == "wall":
            elapsed = (time.perf_counter() - start) * 1e3
            out.draft_ms, out.target_ms, out.overhead_ms = 0.0, elapsed, 0.0
        return out

    def generate(
        self, prompt: Sequence[int], n_tokens: int, rng: np.random.Generator
    ) -> list[int]:
        """Fresh single-sample session; returns the first ``n_tokens`` committed tokens."""
        bank = self.new_bank()
        context = list(prompt)
        out: list[int] = []
        while len(out) < n_tokens:
            step = self.cycle([context], bank, rng)
            context += step.committed[0]
            out += step.committed[0]
        return out[:n_tokens]

    def _n0(self, contexts: Sequence[Sequence[int]]) -> int:
        return max(len(c) for c in contexts)

    def _pick(self, p: np.ndarray, rng: np.random.Generator) -> int:
        return int(np.argmax(p)) if self.greedy else sample_from(p, rng)[0]

    def _vanilla(self, contexts, rng) -> CycleOutcome:
        committed = [[self._pick(self.target.next_distribution(list(c)), rng)] for c in contexts]
        b = len(contexts)
        return CycleOutcome(
            committed,
            [0] * b,
            [0.0] * b,
            [0.0] * b,
            0.0,
            self.costs.target.cost(self._n0(contexts), 1),
            self.overhead_ms,
        )

    def _chain(self, contexts, rng) -> CycleOutcome:
        d = self.chain_length
        n0 = self._n0(contexts)
        committed, accepts, cum, expected = [], [], [], []
        for ctx in contexts:
            ctx = list(ctx)
            tokens, q_rows, value = [], [], 1.0
            values = []
            for _ in range(d):
                q = self.draft.next_distribution(ctx + tokens)
                t = self._pick(q, rng)
                tokens.append(t)
                q_rows.append(q)
                value *= q[t]
                values.append(value)
            p_rows = np.stack([self.target.next_distribution(ctx + tokens[:i]) for i in range(d + 1)])
            res = verify_chain(tokens, np.stack(q_rows), p_rows, rng, greedy=self.greedy)
            committed.append(res.committed)
            accepts.append(res.accept_length)
            cum.append(float(sum(values)))
            expected.append(float("nan"))
        draft_ms = sum(self.costs.draft.cost(n0 + i, 1) for i in range(d))
        return CycleOutcome(
            committed, accepts, cum, expected, draft_ms, self.costs.target.cost(n0, d + 1), self.overhead_ms
        )

    def _plan(self, contexts, bank: DepthBufferBank) -> _TreePlan:
        key = None
        if self._memo_size:
            key = (tuple(tuple(c) for c in contexts), bank.snapshot())
            hit = self._memo.get(key)
            if hit is not None:
                self._memo.move_to_end(key)
                bank.restore(hit.bank_after)
                return hit

        cfg = self.builder
        if self.method == "fixed-tree":
            drafts, widths = [], []
            for ctx in contexts:
                tree, selected = build_fixed_tree(ctx, self.draft, cfg.top_k, cfg.max_depth, cfg.max_verify)
                drafts.append(tree.linearize(selected))
                widths = [len(layer) for layer in tree.layers[1:]]
            trace = None
            verify_count = len(drafts[0])
        else:
            if self.method == "eagle2-style":
                cfg = BuilderConfig.fixed_tree(cfg.top_k, cfg.max_depth, cfg.max_verify)
            batch, trace = build_draft(contexts, self.draft, cfg, self.costs, bank)
            drafts = [lin for _, lin in rerank(batch, trace, cfg, self.costs)]
            widths = list(trace.widths)
            verify_count = trace.verify_count

        rows = []
        for ctx, lin in zip(contexts, drafts):
            ctx = list(ctx)
            root = self.target.next_distribution(ctx)[None, :]
            rows.append(np.concatenate([root, tree_forward(self.target, ctx, lin)]))
        plan = _TreePlan(drafts, rows, widths, verify_count, trace)
        plan.expected = [expected_accept_length(lin, r) for lin, r in zip(drafts, rows)]
        if key is not None:
            plan.bank_after = bank.snapshot()
            self._memo[key] = plan
            if len(self._memo) > self._memo_size:
                self._memo.popitem(last=False)
        return plan

    def _tree(self, contexts, bank, rng) -> CycleOutcome:
        plan = self._plan(contexts, bank)
        committed, accepts, cum = [], [], []
        for lin, rows in zip(plan.drafts, plan.target_rows):
            res = verify_tree(lin, rows, rng, greedy=self.greedy)
            committed.append(res.committed)
            accepts.append(res.accept_length)
            cum.append(float(lin.values.sum()))
        n0 = self._n0(contexts)
        draft_ms, tree_context = 0.0, 0
        feed = 1
        for width in plan.widths:
            draft_ms += self.costs.draft.cost(n0 + tree_context, feed)
            tree_context += width
            feed = width
        target_ms = self.costs.target.cost(n0, plan.verify_count + 1)
        return CycleOutcome(
            committed,
            accepts,
            cum,
            list(plan.expected),
            draft_ms,
            target_ms,
            self.overhead_ms,
            plan.trace,
        )
