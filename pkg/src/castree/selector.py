"""Marginal-utility threshold selection.

Given cumulative utilities ``u[1..n]`` and strictly increasing costs
``c[1..n]``, :func:`max_valid_index` keeps an index ``j`` only if no earlier
index ``i`` sees a marginal utility ``(u[j] - u[i]) / (c[j] - c[i])`` below
the threshold, and returns the largest index kept.  Index 1 is always kept.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np


class SelectorError(ValueError):
    pass


def _as_array(x: Sequence) -> np.ndarray:
    arr = np.asarray(x)
    if arr.dtype.kind not in "fiub":
        arr = np.asarray(x, dtype=object)
    return arr


def max_valid_index(
    u: Sequence[float],
    c: Sequence[float],
    threshold: float,
    *,
    marked_only: bool = False,
) -> int:
    """Largest 1-based index surviving the pairwise slope test.

    With ``marked_only=False`` (the default) every earlier index acts as a
    slope anchor, including ones already rejected.  ``marked_only=True``
    only lets still-marked indices reject later ones.

    Inputs of ``Fraction`` are handled exactly.
    """
    u = _as_array(u)
    c = _as_array(c)
    n = len(u)
    if n == 0 or len(c) != n or u.ndim != 1 or c.ndim != 1:
        raise SelectorError(f"need equal-length non-empty 1-D arrays, got {u.shape} and {c.shape}")
    if not threshold > 0:
        raise SelectorError(f"threshold must be positive, got {threshold}")
    if np.any(np.diff(c) <= 0):
        raise SelectorError("costs must be strictly increasing")
    if n == 1:
        return 1

    du = np.subtract.outer(u, u).T  # du[i, j] = u[j] - u[i]
    dc = np.subtract.outer(c, c).T
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    safe_dc = np.where(upper, dc, 1)
    low = upper & np.asarray(du / safe_dc < threshold, dtype=bool)

    if not marked_only:
        mark = ~low.any(axis=0)
    else:
        mark = np.ones(n, dtype=bool)
        for i in range(n):
            if mark[i]:
                mark &= ~low[i]
    return int(np.flatnonzero(mark)[-1]) + 1


def utility_curve(values_per_sample: Sequence[Sequence[float]], n: int | None = None) -> np.ndarray:
    """``u[k - 1]`` = batch mean of each sample's top-``k`` value sum, for k = 1..n.

    Each sample's list must already be sorted in descending order.
    """
    if len(values_per_sample) == 0:
        raise SelectorError("need at least one sample")
    shortest = min(len(v) for v in values_per_sample)
    if n is None:
        n = shortest
    if not 1 <= n <= shortest:
        raise SelectorError(f"k={n} exceeds the shortest value list ({shortest})")
    stacked = np.array([np.asarray(v[:n], dtype=np.float64) for v in values_per_sample])
    return np.cumsum(stacked.mean(axis=0))


def cumulative_utility(values_per_sample: Sequence[Sequence[float]], k: int) -> float:
    """Batch-averaged sum of the top ``k`` values of every sample."""
    if k < 1:
        raise SelectorError(f"k must be >= 1, got {k}")
    return float(utility_curve(values_per_sample, k)[-1])


def eagle_equivalence_check(
    values_per_sample: Sequence[Sequence[float]],
    top_k: int,
    slope: float = 1.0,
    offset: float = 0.0,
) -> int:
    """Run the selector with the affine-cost setting that reproduces fixed top-K.

    Costs are ``slope * j + offset`` and the threshold is the batch-mean of
    the ``top_k``-th values divided by ``slope``.  For descending lists with a
    strict drop after position ``top_k`` the result is ``top_k``.  Arithmetic
    is exact (``Fraction``) so boundary slopes equal to the threshold are not
    lost to rounding.
    """
    if len(values_per_sample) == 0:
        raise SelectorError("need at least one sample")
    n = min(len(v) for v in values_per_sample)
    if not 1 <= top_k <= n:
        raise SelectorError(f"K={top_k} outside [1, {n}]")
    if not slope > 0:
        raise SelectorError(f"slope must be positive, got {slope}")
    batch = len(values_per_sample)
    lam, delta = Fraction(slope), Fraction(offset)
    exact = [[Fraction(float(x)) for x in v[:n]] for v in values_per_sample]
    mean = [sum(col) / batch for col in zip(*exact)]
    u, total = [], Fraction(0)
    for x in mean:
        total += x
        u.append(total)
    c = [lam * j + delta for j in range(1, n + 1)]
    threshold = sum(v[top_k - 1] for v in exact) / (batch * lam)
    if threshold <= 0:
        raise SelectorError("top-K values must have positive mean")
    return max_valid_index(u, c, threshold)
