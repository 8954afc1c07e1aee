"""Synthetic autoregressive models.

The decoding algorithms only consume next-token distributions, so the models
here are seeded lookup tables: the last ``order`` tokens of the context are
hashed into a seed that draws a Dirichlet distribution over the vocabulary.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from castree.draft_tree import LinearizedDraft

PAD = -1


class LanguageModel(Protocol):
    vocab_size: int

    def next_distribution(self, sequence: Sequence[int]) -> np.ndarray: ...


def check_distribution(p: np.ndarray, vocab_size: int | None = None, atol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or (vocab_size is not None and len(p) != vocab_size):
        raise ValueError(f"distribution has shape {p.shape}, expected ({vocab_size},)")
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"not a probability distribution (sum={p.sum()!r}, min={p.min()!r})")
    return p


class TableModel:
    """Order-``k`` model whose distributions are hashed Dirichlet draws.

    ``concentration`` is the symmetric Dirichlet parameter (small values give
    peaked, low-entropy contexts).  A list of values makes every context pick
    one of them at random, mixing easy and hard contexts.  ``temperature``
    rescales every distribution as ``p ** (1 / temperature)``.
    """

    def __init__(
        self,
        vocab_size: int,
        order: int = 1,
        seed: int = 0,
        concentration: float | Sequence[float] = 1.0,
        temperature: float = 1.0,
    ):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if order < 0:
            raise ValueError("order must be >= 0")
        levels = np.atleast_1d(np.asarray(concentration, dtype=np.float64))
        if levels.ndim != 1 or len(levels) == 0 or np.any(levels <= 0) or temperature <= 0:
            raise ValueError("concentration and temperature must be positive")
        self._levels = levels
        self.vocab_size = vocab_size
        self.order = order
        self.seed = seed
        self.concentration = concentration
        self.temperature = temperature
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def _window(self, sequence: Sequence[int]) -> tuple[int, ...]:
        if self.order == 0:
            return ()
        tail = tuple(int(t) for t in sequence[-self.order :])
        return (PAD,) * (self.order - len(tail)) + tail

    def next_distribution(self, sequence: Sequence[int]) -> np.ndarray:
        key = self._window(sequence)
        p = self._cache.get(key)
        if p is None:
            p = self._draw(key)
            self._cache[key] = p
        return p

    def _draw(self, key: tuple[int, ...]) -> np.ndarray:
        for t in key:
            if t != PAD and not 0 <= t < self.vocab_size:
                raise ValueError(f"token {t} outside vocabulary of size {self.vocab_size}")
        rng = np.random.default_rng([self.seed, *(t + 2 for t in key)])
        level = self._levels[rng.integers(len(self._levels))] if len(self._levels) > 1 else self._levels[0]
        p = rng.dirichlet(np.full(self.vocab_size, level))
        # Dirichlet draws can underflow to exact zeros for tiny concentrations.
        p = np.maximum(p, 1e-12)
        if self.temperature != 1.0:
            p = p ** (1.0 / self.temperature)
        p = p / p.sum()
        p.setflags(write=False)
        return p


class SmoothedDraft:
    """Draft ``(1 - beta) * target + beta * noise``.

    ``noise="uniform"`` mixes in the uniform distribution; ``"dirichlet"``
    mixes in an independent :class:`TableModel`, which also perturbs the
    ranking of tokens relative to the target.
    """

    def __init__(
        self,
        target: LanguageModel,
        beta: float,
        noise: str = "uniform",
        seed: int = 1,
        concentration: float = 1.0,
    ):
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {beta}")
        if noise not in ("uniform", "dirichlet"):
            raise ValueError(f"unknown noise kind {noise!r}")
        self.target = target
        self.beta = beta
        self.noise = noise
        self.vocab_size = target.vocab_size
        self._uniform = np.full(self.vocab_size, 1.0 / self.vocab_size)
        self._noise_model = (
            TableModel(self.vocab_size, getattr(target, "order", 1), seed, concentration)
            if noise == "dirichlet"
            else None
        )
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    def next_distribution(self, sequence: Sequence[int]) -> np.ndarray:
        order = getattr(self.target, "order", None)
        if order is None:
            key = tuple(sequence)
        else:
            key = tuple(sequence[len(sequence) - order :]) if order else ()
        p = self._cache.get(key)
        if p is None:
            if self.beta == 0.0:
                p = self.target.next_distribution(sequence)
            else:
                noise = (
                    self._uniform
                    if self._noise_model is None
                    else self._noise_model.next_distribution(sequence)
                )
                p = (1.0 - self.beta) * self.target.next_distribution(sequence) + self.beta * noise
                p.setflags(write=False)
            self._cache[key] = p
        return p


def ancestor_paths(linearized: LinearizedDraft) -> list[list[int]]:
    """Token path (root excluded, node included) per position, read from the mask."""
    mask = np.asarray(linearized.mask, dtype=bool)
    n = len(linearized.tokens)
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match {n} tokens")
    if not np.all(np.diag(mask)) or np.any(np.triu(mask, k=1)):
        raise ValueError("mask must be lower triangular with a full diagonal")
    tokens = [int(t) for t in linearized.tokens]
    paths = []
    for i in range(n):
        anc = np.flatnonzero(mask[i])
        if len(anc) > 1:
            # The deepest strict ancestor is the parent; its row plus i must equal row i.
            row = mask[anc[-2]].copy()
            row[i] = True
            if not np.array_equal(row, mask[i]):
                raise ValueError(f"mask row {i} is not ancestor-closed")
        paths.append([tokens[j] for j in anc])
    return paths


def tree_forward(
    model: LanguageModel, context: Sequence[int], linearized: LinearizedDraft
) -> np.ndarray:
    """One next-token distribution per draft position, under tree-mask semantics."""
    paths = ancestor_paths(linearized)
    if not paths:
        return np.empty((0, model.vocab_size))
    context = list(context)
    return np.stack([model.next_distribution(context + path) for path in paths])


def pad_batch(sequences: Sequence[Sequence[int]], pad: int = PAD) -> tuple[np.ndarray, list[int]]:
    """Left-pad to a common length; returns the padded batch and original lengths."""
    if len(sequences) == 0:
        raise ValueError("cannot pad an empty batch")
    lengths = [len(s) for s in sequences]
    width = max(lengths)
    out = np.full((len(sequences), width), pad, dtype=np.int64)
    for row, seq in zip(out, sequences):
        if len(seq):
            row[width - len(seq) :] = seq
    return out, lengths


def unpad_batch(padded: np.ndarray, lengths: Sequence[int]) -> list[list[int]]:
    width = padded.shape[1]
    return [padded[i, width - n :].tolist() for i, n in enumerate(lengths)]


def model_from_spec(spec: dict, target: LanguageModel | None = None) -> LanguageModel:
    """Build a model from ``{kind, vocab, order, seed, beta, temperature, ...}``."""
    spec = dict(spec)
    kind = spec.pop("kind", "table")
    if kind == "table":
        model = TableModel(
            vocab_size=spec.pop("vocab"),
            order=spec.pop("order", 1),
            seed=spec.pop("seed", 0),
            concentration=spec.pop("concentration", 1.0),
            temperature=spec.pop("temperature", 1.0),
        )
        _reject_unknown(spec)
        return model
    if kind == "smoothed":
        if target is None:
            raise ValueError("a smoothed draft needs a target model")
        vocab = spec.pop("vocab", target.vocab_size)
        if vocab != target.vocab_size:
            raise ValueError("draft and target vocabularies differ")
        model = SmoothedDraft(
            target,
            beta=spec.pop("beta"),
            noise=spec.pop("noise", "uniform"),
            seed=spec.pop("seed", 1),
            concentration=spec.pop("concentration", 1.0),
        )
        _reject_unknown(spec)
        return model
    raise ValueError(f"unknown model kind {kind!r}")


def _reject_unknown(rest: dict) -> None:
    if rest:
        raise ValueError(f"unknown model spec fields: {sorted(rest)}")
