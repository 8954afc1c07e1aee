"""Inference-cost lookup tables.

A :class:`CostTable` stores ``f(B, c, n)``, the time of one forward call
that feeds ``n`` new tokens per sample to a batch of ``B`` samples whose
context holds ``c`` tokens.  Context lengths are bucketed in steps of
``bucket_width`` up to ``bucket_count`` buckets; token counts run from 1 to
``max_tokens``.  Both bucket and token indices are 1-based in the public API.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np

Role = Literal["target", "draft"]
Measurer = Callable[[int, int, int], float]

ROLES = ("target", "draft")


class CostModelError(ValueError):
    """Base class for cost-table problems."""


class ParameterError(CostModelError):
    pass


class CalibrationError(CostModelError):
    pass


class ConfigurationError(CostModelError):
    pass


class TableLoadError(CostModelError):
    pass


@dataclass(frozen=True)
class CostTable:
    """Bucketed grid of per-call inference times in milliseconds.

    ``grid[k - 1, n - 1]`` holds ``f(B, k * L, n)``.
    """

    role: Role
    batch_size: int
    bucket_width: int
    bucket_count: int
    max_tokens: int
    grid: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ParameterError(f"role must be one of {ROLES}, got {self.role!r}")
        for name in ("batch_size", "bucket_width", "bucket_count", "max_tokens"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        grid = np.array(self.grid, dtype=np.float64)
        if grid.shape != (self.bucket_count, self.max_tokens):
            raise ParameterError(
                f"grid shape {grid.shape} != ({self.bucket_count}, {self.max_tokens})"
            )
        if not np.all(np.isfinite(grid)) or np.any(grid <= 0):
            k, n = np.argwhere(~(np.isfinite(grid) & (grid > 0)))[0]
            raise ParameterError(f"grid cell ({k + 1}, {n + 1}) is not a finite positive time")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)

    @property
    def max_context(self) -> int:
        return self.bucket_width * self.bucket_count

    def row(self, c: int) -> np.ndarray:
        """Cost row for context length ``c``; entry ``n - 1`` is ``f(B, select(c), n)``."""
        return self.grid[select_bucket(self, c) - 1]

    def cost(self, c: int, n: int) -> float:
        if not 1 <= n <= self.max_tokens:
            raise ParameterError(f"token count {n} outside [1, {self.max_tokens}]")
        return float(self.grid[select_bucket(self, c) - 1, n - 1])

    def same_shape(self, other: CostTable) -> bool:
        return (
            self.batch_size == other.batch_size
            and self.bucket_width == other.bucket_width
            and self.bucket_count == other.bucket_count
            and self.max_tokens == other.max_tokens
        )


def monotone_repair(grid: np.ndarray) -> np.ndarray:
    """Running maximum along the token axis, so no row ever decreases."""
    return np.maximum.accumulate(np.asarray(grid, dtype=np.float64), axis=-1)


def build_table(
    measurer: Measurer,
    batch_size: int,
    bucket_width: int,
    bucket_count: int,
    max_tokens: int,
    *,
    role: Role = "target",
    repetitions: int = 1,
) -> CostTable:
    """Measure ``measurer(B, k * L, n)`` over the whole grid.

    Each cell is the median over ``repetitions`` calls; rows are then
    repaired to be non-decreasing in ``n``.
    """
    if bucket_width * bucket_count <= 0 or max_tokens <= 0 or batch_size <= 0:
        raise ParameterError(
            f"need positive B, L*M and N (got B={batch_size}, L={bucket_width}, "
            f"M={bucket_count}, N={max_tokens})"
        )
    if repetitions < 1:
        raise ParameterError(f"repetitions must be >= 1, got {repetitions}")

    grid = np.empty((bucket_count, max_tokens))
    samples = np.empty(repetitions)
    for k in range(1, bucket_count + 1):
        for n in range(1, max_tokens + 1):
            for r in range(repetitions):
                samples[r] = measurer(batch_size, k * bucket_width, n)
            if not np.all(np.isfinite(samples)) or np.any(samples <= 0):
                raise CalibrationError(
                    f"non-positive measurement at B={batch_size}, c={k * bucket_width}, n={n}: "
                    f"{samples.tolist()}"
                )
            grid[k - 1, n - 1] = np.median(samples)
    return CostTable(role, batch_size, bucket_width, bucket_count, max_tokens, monotone_repair(grid))


def select_bucket(table: CostTable, c: int) -> int:
    """1-based bucket index for context length ``c``, clamped to the last bucket."""
    return min(int(c) // table.bucket_width, table.bucket_count - 1) + 1


def draft_cost_row(draft: CostTable, c: int) -> np.ndarray:
    if draft.role != "draft":
        raise ConfigurationError(f"expected a draft table, got role={draft.role!r}")
    return draft.row(c)


def _check_tokens(table: CostTable, k: int) -> None:
    if not 1 <= k <= table.max_tokens:
        raise ParameterError(f"token count {k} outside [1, {table.max_tokens}]")


def normalized_draft_cost(draft: CostTable, target: CostTable, c: int, k: int) -> float:
    """Draft cost of a ``k``-token call relative to a one-token target call."""
    if not draft.same_shape(target):
        raise ConfigurationError("draft and target tables must share B, L, M and N")
    _check_tokens(draft, k)
    return float(draft.row(c)[k - 1] / target.row(c)[0])


def normalized_target_cost(target: CostTable, c: int, k: int) -> float:
    """Target cost of a ``k``-token call relative to a one-token call."""
    _check_tokens(target, k)
    row = target.row(c)
    return float(row[k - 1] / row[0])


@dataclass(frozen=True)
class CostPair:
    """Draft and target tables for one batch size."""

    draft: CostTable
    target: CostTable

    def __post_init__(self) -> None:
        if self.draft.role != "draft" or self.target.role != "target":
            raise ConfigurationError(
                f"roles must be (draft, target), got ({self.draft.role}, {self.target.role})"
            )
        if not self.draft.same_shape(self.target):
            raise ConfigurationError("draft and target tables must share B, L, M and N")

    @property
    def batch_size(self) -> int:
        return self.target.batch_size

    def draft_curve(self, c: int, n: int) -> np.ndarray:
        """Normalized draft costs for k = 1..n (vectorized ``normalized_draft_cost``)."""
        _check_tokens(self.draft, n)
        return self.draft.row(c)[:n] / self.target.row(c)[0]

    def target_curve(self, c: int, n: int) -> np.ndarray:
        """Normalized target costs for k = 1..n (vectorized ``normalized_target_cost``)."""
        _check_tokens(self.target, n)
        row = self.target.row(c)
        return row[:n] / row[0]


def save_table(table: CostTable, path: str | Path) -> None:
    payload = {
        "role": table.role,
        "batch_size": table.batch_size,
        "bucket_width": table.bucket_width,
        "bucket_count": table.bucket_count,
        "max_tokens": table.max_tokens,
        "grid": table.grid.ravel().tolist(),
        "unit": "ms",
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_table(path: str | Path) -> CostTable:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TableLoadError(f"{path}: cannot read cost table: {exc}") from exc
    return table_from_dict(payload, source=str(path))


def table_from_dict(payload: dict, source: str = "<dict>") -> CostTable:
    if not isinstance(payload, dict):
        raise TableLoadError(f"{source}: expected a JSON object")
    for key in ("role", "batch_size", "bucket_width", "bucket_count", "max_tokens", "grid"):
        if key not in payload:
            raise TableLoadError(f"{source}: missing field {key!r}")
    if payload.get("unit", "ms") != "ms":
        raise TableLoadError(f"{source}: field 'unit' must be 'ms', got {payload['unit']!r}")
    if payload["role"] not in ROLES:
        raise TableLoadError(f"{source}: field 'role' must be one of {ROLES}")
    dims = {}
    for key in ("batch_size", "bucket_width", "bucket_count", "max_tokens"):
        value = payload[key]
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise TableLoadError(f"{source}: field {key!r} must be a positive integer, got {value!r}")
        dims[key] = value
    cells = payload["grid"]
    if not isinstance(cells, list):
        raise TableLoadError(f"{source}: field 'grid' must be a flat array")
    m, n = dims["bucket_count"], dims["max_tokens"]
    if len(cells) != m * n:
        raise TableLoadError(
            f"{source}: field 'grid' has {len(cells)} cells, expected bucket_count*max_tokens = {m * n}"
        )
    try:
        grid = np.asarray(cells, dtype=np.float64).reshape(m, n)
    except (TypeError, ValueError) as exc:
        raise TableLoadError(f"{source}: field 'grid' holds non-numeric cells") from exc
    bad = np.argwhere(~(np.isfinite(grid) & (grid > 0)))
    if len(bad):
        k, j = bad[0]
        raise TableLoadError(
            f"{source}: field 'grid' cell (bucket={k + 1}, tokens={j + 1}) = {grid[k, j]!r} "
            "is not a finite positive time"
        )
    return CostTable(payload["role"], grid=grid, **dims)


@dataclass(frozen=True)
class AnalyticCost:
    """Closed-form synthetic cost ``f(B, c, n)`` in milliseconds.

    ``base + context_coef * B * c + linear_coef * w + quadratic_coef * w**2``
    with ``w = max(B * n - knee, 0)``.  ``knee`` models the memory-bound
    regime where extra tokens per call are nearly free.
    """

    base: float = 1.0
    context_coef: float = 0.0
    linear_coef: float = 0.0
    quadratic_coef: float = 0.0
    knee: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.base <= 0:
            raise ParameterError("base cost must be positive")
        if min(self.context_coef, self.linear_coef, self.quadratic_coef, self.knee, self.jitter) < 0:
            raise ParameterError("analytic cost coefficients must be non-negative")
        object.__setattr__(self, "_rng", np.random.default_rng(self.seed))

    def exact(self, batch_size: int, context: int, tokens: int) -> float:
        w = max(batch_size * tokens - self.knee, 0.0)
        return (
            self.base
            + self.context_coef * batch_size * context
            + self.linear_coef * w
            + self.quadratic_coef * w * w
        )

    def __call__(self, batch_size: int, context: int, tokens: int) -> float:
        value = self.exact(batch_size, context, tokens)
        if self.jitter:
            value *= 1.0 + self.jitter * self._rng.uniform(-1.0, 1.0)
        return value

    @classmethod
    def from_dict(cls, spec: dict) -> AnalyticCost:
        allowed = {"base", "context_coef", "linear_coef", "quadratic_coef", "knee", "jitter", "seed"}
        unknown = set(spec) - allowed
        if unknown:
            raise ParameterError(f"unknown analytic cost fields: {sorted(unknown)}")
        return cls(**spec)


def matmul_measurer(d_model: int = 256, layers: int = 2) -> Measurer:
    """Wall-clock measurer timing a tiny numpy transformer-like workload."""
    import time

    rng = np.random.default_rng(0)
    weight = rng.standard_normal((d_model, d_model)).astype(np.float32)

    def measure(batch_size: int, context: int, tokens: int) -> float:
        x = rng.standard_normal((batch_size * tokens, d_model)).astype(np.float32)
        keys = rng.standard_normal((max(context, 1), d_model)).astype(np.float32)
        start = time.perf_counter()
        for _ in range(layers):
            scores = x @ keys.T
            x = np.tanh(x @ weight + scores[:, :1])
        return max((time.perf_counter() - start) * 1e3, 1e-6)

    return measure


__all__ = [
    "AnalyticCost",
    "CalibrationError",
    "ConfigurationError",
    "CostModelError",
    "CostPair",
    "CostTable",
    "ParameterError",
    "TableLoadError",
    "build_table",
    "draft_cost_row",
    "load_table",
    "matmul_measurer",
    "monotone_repair",
    "normalized_draft_cost",
    "normalized_target_cost",
    "save_table",
    "select_bucket",
    "table_from_dict",
]
