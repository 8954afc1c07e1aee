"""Candidate-token trees and their linearization for batched verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ROOT = 0


class SubtreeError(ValueError):
    """A node selection is not closed under the parent relation."""


@dataclass(frozen=True)
class DraftNode:
    token: int
    parent: int | None
    depth: int
    local_prob: float
    value: float
    creation_order: int


@dataclass
class DraftTree:
    """Arena of :class:`DraftNode` keyed by integer handle.

    Handle ``0`` is the root, which stands for the committed context and
    carries no drafted token.  A node's handle equals its creation order.
    """

    context_length: int = 0
    sample_index: int = 0
    nodes: list[DraftNode] = field(default_factory=list)
    layers: list[list[int]] = field(default_factory=list)
    children: list[list[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.nodes:
            self.nodes.append(DraftNode(-1, None, 0, 1.0, 1.0, 0))
            self.layers.append([ROOT])
            self.children.append([])

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depth(self) -> int:
        return len(self.layers) - 1

    def add_children(
        self, parent: int, tokens: Sequence[int], probs: Sequence[float]
    ) -> list[int]:
        if len(tokens) != len(probs):
            raise ValueError(f"{len(tokens)} tokens but {len(probs)} probabilities")
        parent_node = self.nodes[parent]
        depth = parent_node.depth + 1
        if depth == len(self.layers):
            self.layers.append([])
        handles = []
        for token, prob in zip(tokens, probs):
            prob = float(prob)
            if not 0.0 <= prob <= 1.0:
                raise ValueError(f"draft probability {prob} outside [0, 1]")
            handle = len(self.nodes)
            self.nodes.append(
                DraftNode(int(token), parent, depth, prob, parent_node.value * prob, handle)
            )
            self.children.append([])
            self.children[parent].append(handle)
            self.layers[depth].append(handle)
            handles.append(handle)
        return handles

    def layer_values(self, i: int) -> list[tuple[int, float]]:
        """Layer ``i`` as ``(handle, value)`` pairs, highest value first, ties by creation."""
        layer = self.layers[i]
        return [(h, self.nodes[h].value) for h in sorted(layer, key=lambda h: -self.nodes[h].value)]

    def path(self, handle: int) -> list[int]:
        """Handles from the first drafted ancestor down to ``handle`` (root excluded)."""
        out = []
        while handle != ROOT:
            out.append(handle)
            handle = self.nodes[handle].parent
        out.reverse()
        return out

    def path_tokens(self, handle: int) -> list[int]:
        return [self.nodes[h].token for h in self.path(handle)]

    def validate_subtree(self, selected: Iterable[int]) -> bool:
        chosen = set(selected) | {ROOT}
        return all(self.nodes[h].parent in chosen for h in chosen if h != ROOT)

    def linearize(self, selected: Iterable[int]) -> LinearizedDraft:
        chosen = set(selected)
        chosen.discard(ROOT)
        if not self.validate_subtree(chosen):
            raise SubtreeError("selection is not closed under the parent relation")
        order = sorted(chosen, key=lambda h: (self.nodes[h].depth, h))
        position = {h: i for i, h in enumerate(order)}
        n = len(order)
        mask = np.zeros((n, n), dtype=bool)
        parents = np.full(n, -1, dtype=np.int64)
        for i, h in enumerate(order):
            p = self.nodes[h].parent
            if p != ROOT:
                parents[i] = position[p]
                mask[i] = mask[parents[i]]
            mask[i, i] = True
        return LinearizedDraft(
            tokens=np.array([self.nodes[h].token for h in order], dtype=np.int64),
            mask=mask,
            nodes=np.array(order, dtype=np.int64),
            parents=parents,
            values=np.array([self.nodes[h].value for h in order]),
        )

    def to_dot(self, selected: Iterable[int] | None = None) -> str:
        keep = set(range(len(self.nodes))) if selected is None else set(selected) | {ROOT}
        lines = [f"digraph draft_{self.sample_index} {{"]
        for node in self.nodes:
            h = node.creation_order
            if h not in keep:
                continue
            label = "root" if h == ROOT else f"{node.token}:{node.value:.4g}"
            lines.append(f'  n{h} [label="{label}"];')
            if node.parent is not None:
                lines.append(f"  n{node.parent} -> n{h};")
        lines.append("}")
        return "\n".join(lines)


def new_tree(root_context_length: int = 0, sample_index: int = 0) -> DraftTree:
    return DraftTree(context_length=root_context_length, sample_index=sample_index)


@dataclass(frozen=True)
class LinearizedDraft:
    """Flat verification input.

    ``mask[i, j]`` is true iff position ``j`` holds an ancestor of position
    ``i`` or ``j == i``.  ``parents[i]`` is the position of the parent, or
    ``-1`` when the parent is the root.
    """

    tokens: np.ndarray
    mask: np.ndarray
    nodes: np.ndarray
    parents: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.tokens)

    def children_of(self) -> list[list[int]]:
        """Child positions per position; index ``0`` is the root, position ``i`` is ``i + 1``."""
        out: list[list[int]] = [[] for _ in range(len(self.tokens) + 1)]
        for i, p in enumerate(self.parents):
            out[p + 1].append(i)
        return out


def empty_draft() -> LinearizedDraft:
    return new_tree().linearize([])


def chain_tree(tokens: Sequence[int], probs: Sequence[float], context_length: int = 0) -> DraftTree:
    """Tree holding a single root-descending path."""
    tree = new_tree(context_length)
    parent = ROOT
    for token, prob in zip(tokens, probs):
        (parent,) = tree.add_children(parent, [token], [prob])
    return tree
