"""Lossless acceptance of drafted tokens against the target model.

Chains use the classic speculative-sampling rule: accept drafted token ``x``
with probability ``min(1, p(x) / q(x))`` and, on the first rejection, sample
the correction from ``norm(max(0, p - q))``.

Trees apply the same rule recursively over the children of the current node.
After a child is rejected the target distribution is replaced by its residual
and the proposal loses the rejected token, so the next sibling is judged
against what is left.  Two proposal models are supported:

* deterministic children (top-K of the draft distribution): each child is a
  point-mass proposal, so it is accepted with probability ``p(x)`` and a
  rejection simply removes ``x`` from ``p``;
* sampled children (drawn without replacement from ``q``): ``q`` is passed
  explicitly and renormalized over the tokens not yet rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from castree.draft_tree import LinearizedDraft


class VerificationError(ValueError):
    pass


@dataclass(frozen=True)
class VerifyStep:
    position: int
    token: int
    p: float
    q: float
    u: float
    accepted: bool


@dataclass
class VerifyResult:
    """Outcome of one verification.

    ``accepted_path`` holds the accepted drafted tokens in root-to-leaf
    order and ``accepted_positions`` their linearized positions.
    ``bonus_token`` is the extra committed token: the correction sample when
    ``corrected`` is true, otherwise a fresh target sample after the last
    accepted token.
    """

    accepted_path: list[int]
    accepted_positions: list[int]
    bonus_token: int
    corrected: bool
    log: list[VerifyStep] = field(default_factory=list)
    final_draw: float | None = None

    @property
    def accept_length(self) -> int:
        return len(self.accepted_path)

    @property
    def committed(self) -> list[int]:
        return [*self.accepted_path, self.bonus_token]


def sample_from(p: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw; returns the token and the uniform used."""
    cdf = np.cumsum(p)
    u = rng.random()
    token = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(token, len(p) - 1), u


def accept_token(p: float, q: float, u: float) -> bool:
    if not q > 0:
        raise VerificationError(f"drafted token must have positive draft probability, got q={q}")
    if p < 0:
        raise VerificationError(f"target probability must be non-negative, got p={p}")
    return u <= min(1.0, p / q)


def residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``norm(max(0, p - q))``; falls back to ``p`` when no mass is left."""
    r = np.maximum(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64), 0.0)
    total = r.sum()
    if total <= 1e-15:
        return np.array(p, dtype=np.float64)
    return r / total


def verify_chain(
    draft_tokens: Sequence[int],
    draft_dists: np.ndarray,
    target_dists: np.ndarray,
    rng: np.random.Generator,
    *,
    greedy: bool = False,
) -> VerifyResult:
    """Sequentially verify a drafted chain.

    ``draft_dists[i]`` is the draft distribution the ``i``-th token was
    sampled from; ``target_dists`` has one extra row for the bonus token.
    """
    d = len(draft_tokens)
    draft_dists = np.asarray(draft_dists, dtype=np.float64).reshape(d, -1) if d else draft_dists
    target_dists = np.asarray(target_dists, dtype=np.float64)
    if target_dists.ndim != 2 or len(target_dists) != d + 1 or (d and len(draft_dists) != d):
        raise VerificationError(
            f"need {d} draft rows and {d + 1} target rows, got {len(draft_dists) if d else 0} "
            f"and {len(target_dists)}"
        )
    accepted: list[int] = []
    log: list[VerifyStep] = []
    for i, token in enumerate(draft_tokens):
        token = int(token)
        p_row, q_row = target_dists[i], draft_dists[i]
        if greedy:
            best = int(np.argmax(p_row))
            ok = best == token
            log.append(VerifyStep(i, token, float(ok), 1.0, 0.0, ok))
            if not ok:
                return VerifyResult(accepted, list(range(len(accepted))), best, True, log)
            accepted.append(token)
            continue
        u = rng.random()
        ok = accept_token(p_row[token], q_row[token], u)
        log.append(VerifyStep(i, token, float(p_row[token]), float(q_row[token]), u, ok))
        if not ok:
            fix, draw = sample_from(residual(p_row, q_row), rng)
            return VerifyResult(accepted, list(range(len(accepted))), fix, True, log, draw)
        accepted.append(token)
    if greedy:
        return VerifyResult(accepted, list(range(d)), int(np.argmax(target_dists[d])), False, log)
    bonus, draw = sample_from(target_dists[d], rng)
    return VerifyResult(accepted, list(range(d)), bonus, False, log, draw)


def verify_tree(
    linearized: LinearizedDraft,
    target_dists: np.ndarray,
    rng: np.random.Generator,
    draft_dists: np.ndarray | None = None,
    *,
    greedy: bool = False,
) -> VerifyResult:
    """Walk the linearized tree from the root, accepting at most one child per level.

    ``target_dists`` has ``len(linearized) + 1`` rows: row 0 is the target
    distribution after the committed context and row ``i + 1`` the one after
    position ``i``.  ``draft_dists``, when given, has the same layout and holds
    the draft distributions children were sampled from; when omitted the
    children are treated as deterministic proposals.  Siblings are tried in
    linearization order.
    """
    n = len(linearized)
    target_dists = np.asarray(target_dists, dtype=np.float64)
    if target_dists.ndim != 2 or len(target_dists) != n + 1:
        raise VerificationError(f"need {n + 1} target rows, got {target_dists.shape}")
    if draft_dists is not None:
        draft_dists = np.asarray(draft_dists, dtype=np.float64)
        if draft_dists.shape != target_dists.shape:
            raise VerificationError(
                f"draft rows {draft_dists.shape} do not match target rows {target_dists.shape}"
            )
    mask = np.asarray(linearized.mask, dtype=bool)
    if mask.shape != (n, n):
        raise VerificationError(f"mask shape {mask.shape} does not match {n} positions")
    children = linearized.children_of()
    tokens = [int(t) for t in linearized.tokens]

    accepted: list[int] = []
    positions: list[int] = []
    log: list[VerifyStep] = []
    row = 0  # row index into the dists: 0 = root, i + 1 = position i
    while True:
        kids = children[row]
        if greedy:
            best = int(np.argmax(target_dists[row]))
            hit = next((k for k in kids if tokens[k] == best), None)
            for k in kids:
                log.append(VerifyStep(k, tokens[k], float(k == hit), 1.0, 0.0, k == hit))
                if k == hit:
                    break
            if hit is None:
                return VerifyResult(accepted, positions, best, bool(kids), log)
            accepted.append(best)
            positions.append(hit)
            row = hit + 1
            continue

        p = target_dists[row]
        q = None if draft_dists is None else draft_dists[row].copy()
        next_row = None
        for k in kids:
            t = tokens[k]
            q_t = 1.0 if q is None else q[t]
            u = rng.random()
            ok = accept_token(p[t], q_t, u)
            log.append(VerifyStep(k, t, float(p[t]), float(q_t), u, ok))
            if ok:
                next_row = k + 1
                break
            if q is None:
                p = p.copy()
                p[t] = 0.0
                total = p.sum()
                p = target_dists[row] if total <= 1e-15 else p / total
            else:
                p = residual(p, q)
                q[t] = 0.0
                total = q.sum()
                if total > 0:
                    q /= total
        if next_row is None:
            if not kids:
                bonus, draw = sample_from(p, rng)
                return VerifyResult(accepted, positions, bonus, False, log, draw)
            fix, draw = sample_from(p, rng)
            return VerifyResult(accepted, positions, fix, True, log, draw)
        accepted.append(tokens[next_row - 1])
        positions.append(next_row - 1)
        row = next_row
