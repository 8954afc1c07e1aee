"""Run configuration, decode runs, comparisons and figure datasets."""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from castree.cost_model import (
    AnalyticCost,
    CostPair,
    ParameterError,
    build_table,
    load_table,
    matmul_measurer,
    save_table,
)
from castree.engine import METHODS, SpeculativeDecoder
from castree.lm import LanguageModel, model_from_spec
from castree.tree_builder import BuilderConfig

TOGGLES = {"bp": "enable_bp", "dp": "enable_dp", "dr": "enable_dr"}

DEFAULT_COSTS = {
    "bucket_width": 128,
    "bucket_count": 8,
    "max_tokens": 128,
    "target": {"base": 20.0, "context_coef": 0.0005, "linear_coef": 0.05, "knee": 64},
    "draft": {"base": 1.0, "context_coef": 0.00005, "linear_coef": 0.01, "knee": 32},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to reproduce one decode run.

    ``costs`` is either ``{"tables": {"draft": path, "target": path}}`` or an
    analytic description ``{"bucket_width", "bucket_count", "max_tokens",
    "target": {...}, "draft": {...}}`` whose tables are built for
    ``batch_size`` on the fly.  ``prompts`` is ``{"count", "length", "seed"}``
    for synthetic prompts or ``{"file": path}`` for a text file (one prompt per
    line, tokenized as UTF-8 bytes modulo the vocabulary).
    """

    name: str = ""
    method: str = "cast"
    target: dict = field(default_factory=lambda: {"kind": "table", "vocab": 32, "order": 2, "seed": 0})
    draft: dict = field(default_factory=lambda: {"kind": "smoothed", "beta": 0.5})
    builder: BuilderConfig = field(default_factory=BuilderConfig)
    batch_size: int = 1
    temperature: int = 1
    prompts: dict = field(default_factory=lambda: {"count": 8, "length": 16, "seed": 0})
    max_new_tokens: int = 64
    clock: str = "sim"
    costs: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_COSTS)))
    seed: int = 0
    chain_length: int = 4
    cycle_overhead_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.temperature not in (0, 1):
            raise ConfigError("temperature must be 0 (greedy) or 1 (sampling)")
        if self.clock not in ("sim", "wall"):
            raise ConfigError("clock must be 'sim' or 'wall'")
        if self.batch_size < 1 or self.max_new_tokens < 1 or self.chain_length < 1:
            raise ConfigError("batch_size, max_new_tokens and chain_length must be >= 1")
        if isinstance(self.builder, dict):
            self.builder = _builder_from_dict(self.builder)

    @property
    def label(self) -> str:
        return self.name or self.method

    @classmethod
    def from_dict(cls, payload: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["builder"] = dataclasses.asdict(self.builder)
        return out

    def replace(self, **changes: Any) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def with_builder(self, **changes: Any) -> RunConfig:
        return self.replace(builder=dataclasses.replace(self.builder, **changes))

    def toggled(self, *names: str) -> RunConfig:
        """Flip the named components (``bp``, ``dp``, ``dr``)."""
        changes = {}
        for name in names:
            if name not in TOGGLES:
                raise ConfigError(f"unknown toggle {name!r}; expected one of {sorted(TOGGLES)}")
            attr = TOGGLES[name]
            changes[attr] = not changes.get(attr, getattr(self.builder, attr))
        return self.with_builder(**changes)


def _builder_from_dict(payload: dict) -> BuilderConfig:
    known = {f.name for f in dataclasses.fields(BuilderConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown builder fields: {sorted(unknown)}")
    try:
        return BuilderConfig(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid builder config: {exc}") from exc


def build_models(config: RunConfig) -> tuple[LanguageModel, LanguageModel]:
    try:
        target = model_from_spec(config.target)
        draft = model_from_spec(config.draft, target=target)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model spec: {exc}") from exc
    return target, draft


def build_costs(config: RunConfig) -> CostPair:
    spec = config.costs
    if "tables" in spec:
        draft = load_table(spec["tables"]["draft"])
        target = load_table(spec["tables"]["target"])
        for table in (draft, target):
            if table.batch_size != config.batch_size:
                raise ConfigError(
                    f"cost table for B={table.batch_size} does not match batch_size={config.batch_size}"
                )
        return CostPair(draft, target)
    try:
        dims = (spec["bucket_width"], spec["bucket_count"], spec["max_tokens"])
        target = build_table(AnalyticCost.from_dict(spec["target"]), config.batch_size, *dims, role="target")
        draft = build_table(AnalyticCost.from_dict(spec["draft"]), config.batch_size, *dims, role="draft")
    except KeyError as exc:
        raise ConfigError(f"cost spec is missing {exc}") from exc
    return CostPair(draft, target)


def make_prompts(config: RunConfig, vocab_size: int) -> list[list[int]]:
    spec = config.prompts
    if "file" in spec:
        lines = [ln for ln in Path(spec["file"]).read_text().splitlines() if ln.strip()]
        if not lines:
            raise ConfigError(f"prompt file {spec['file']} is empty")
        return [[b % vocab_size for b in ln.encode("utf-8")] for ln in lines]
    count = spec.get("count", 8)
    length = spec.get("length", 16)
    if count < 1 or length < 1:
        raise ConfigError("prompt count and length must be >= 1")
    rng = np.random.default_rng(spec.get("seed", 0))
    return rng.integers(0, vocab_size, size=(count, length)).tolist()


@dataclass
class CycleRecord:
    accept_lengths: list[int]
    cumulative_probs: list[float]
    expected_accepts: list[float]
    draft_ms: float
    target_ms: float
    overhead_ms: float
    trace: dict | None = None


@dataclass
class DecodeReport:
    name: str
    method: str
    batch_size: int
    greedy: bool
    clock: str
    max_new_tokens: int
    outputs: list[list[int]]
    cycles: list[CycleRecord]
    method_time_ms: float
    vanilla_time_ms: float
    batch_speedups: list[float]
    config: dict

    @property
    def speedup(self) -> float:
        return self.vanilla_time_ms / self.method_time_ms

    @property
    def total_tokens(self) -> int:
        return sum(len(o) for o in self.outputs)

    @property
    def mean_accept_length(self) -> float:
        acc = [a for c in self.cycles for a in c.accept_lengths]
        return float(np.mean(acc)) if acc else 0.0

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["speedup"] = self.speedup
        out["total_tokens"] = self.total_tokens
        out["mean_accept_length"] = self.mean_accept_length
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, default=_json_default))

    @classmethod
    def load(cls, path: str | Path) -> DecodeReport:
        payload = json.loads(Path(path).read_text())
        for key in ("speedup", "total_tokens", "mean_accept_length"):
            payload.pop(key, None)
        payload["cycles"] = [CycleRecord(**c) for c in payload["cycles"]]
        return cls(**payload)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj)}")


def vanilla_time(costs: CostPair, start_context: int, new_tokens: int) -> float:
    """Simulated time of plain autoregressive decoding of ``new_tokens`` tokens."""
    return sum(costs.target.cost(start_context + t, 1) for t in range(new_tokens))


def make_decoder(config: RunConfig) -> SpeculativeDecoder:
    target, draft = build_models(config)
    costs = build_costs(config)
    try:
        return SpeculativeDecoder(
            config.method,
            target,
            draft,
            costs,
            config.builder,
            greedy=config.temperature == 0,
            chain_length=config.chain_length,
            overhead_ms=config.cycle_overhead_ms,
            clock=config.clock,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run(config: RunConfig, decoder: SpeculativeDecoder | None = None) -> DecodeReport:
    """Decode every prompt in batches of ``batch_size`` and charge the clock."""
    decoder = decoder or make_decoder(config)
    prompts = make_prompts(config, decoder.target.vocab_size)
    rng = np.random.default_rng(config.seed)
    bank = decoder.new_bank()
    b = config.batch_size
    outputs: list[list[int]] = []
    cycles: list[CycleRecord] = []
    method_ms = vanilla_ms = 0.0
    batch_speedups = []
    for start in range(0, len(prompts), b):
        contexts = [list(p) for p in prompts[start : start + b]]
        produced: list[list[int]] = [[] for _ in contexts]
        batch_ms = 0.0
        while min(len(x) for x in produced) < config.max_new_tokens:
            step = decoder.cycle(contexts, bank, rng)
            for j, toks in enumerate(step.committed):
                contexts[j] += toks
                produced[j] += toks
            batch_ms += step.total_ms
            cycles.append(
                CycleRecord(
                    step.accept_lengths,
                    step.cumulative_probs,
                    step.expected_accepts,
                    step.draft_ms,
                    step.target_ms,
                    step.overhead_ms,
                    step.trace.to_dict() if step.trace else None,
                )
            )
        outputs += [x[: config.max_new_tokens] for x in produced]
        n0 = max(len(p) for p in prompts[start : start + b])
        batch_vanilla = vanilla_time(decoder.costs, n0, config.max_new_tokens)
        if config.clock == "wall":
            # Wall-clock baseline: time the target's one-token steps for this batch.
            batch_vanilla = _wall_vanilla(config, decoder, prompts[start : start + b])
        method_ms += batch_ms
        vanilla_ms += batch_vanilla
        batch_speedups.append(batch_vanilla / batch_ms)
    return DecodeReport(
        name=config.label,
        method=config.method,
        batch_size=b,
        greedy=config.temperature == 0,
        clock=config.clock,
        max_new_tokens=config.max_new_tokens,
        outputs=outputs,
        cycles=cycles,
        method_time_ms=method_ms,
        vanilla_time_ms=vanilla_ms,
        batch_speedups=batch_speedups,
        config=config.to_dict(),
    )


def _wall_vanilla(config: RunConfig, decoder: SpeculativeDecoder, prompts: Sequence[Sequence[int]]) -> float:
    vanilla = SpeculativeDecoder(
        "vanilla", decoder.target, decoder.draft, decoder.costs, decoder.builder,
        greedy=decoder.greedy, clock="wall",
    )
    rng = np.random.default_rng(config.seed)
    contexts = [list(p) for p in prompts]
    total = 0.0
    for _ in range(config.max_new_tokens):
        step = vanilla.cycle(contexts, vanilla.new_bank(), rng)
        for ctx, toks in zip(contexts, step.committed):
            ctx += toks
        total += step.total_ms
    return total


def compare(configs: Sequence[RunConfig]) -> list[dict]:
    """Run configs that share prompts, seeds and models; one row per config."""
    if not configs:
        raise ConfigError("compare needs at least one config")
    ref = configs[0]
    for cfg in configs[1:]:
        for attr in ("prompts", "seed", "target", "draft", "max_new_tokens", "batch_size"):
            if getattr(cfg, attr) != getattr(ref, attr):
                raise ConfigError(f"config {cfg.label!r} differs from {ref.label!r} in {attr!r}")
    rows = []
    for cfg in configs:
        report = run(cfg)
        rows.append(
            {
                "name": cfg.label,
                "method": cfg.method,
                "batch_size": cfg.batch_size,
                "enable_bp": cfg.builder.enable_bp,
                "enable_dp": cfg.builder.enable_dp,
                "enable_dr": cfg.builder.enable_dr,
                "speedup": report.speedup,
                "mean_accept_length": report.mean_accept_length,
                "method_time_ms": report.method_time_ms,
                "vanilla_time_ms": report.vanilla_time_ms,
                "batch_speedups": report.batch_speedups,
            }
        )
    return rows


def ablation_configs(base: RunConfig, include_baseline: bool = False) -> list[RunConfig]:
    """Full CAST plus one variant per disabled component (optionally the fixed tree)."""
    full = base.replace(method="cast", name="cast").with_builder(
        enable_bp=True, enable_dp=True, enable_dr=True
    )
    out = [full]
    for key in ("dr", "dp", "bp"):
        out.append(full.toggled(key).replace(name=f"cast-no-{key}"))
    if include_baseline:
        out.insert(0, base.replace(method="fixed-tree", name="fixed-tree"))
    return out


def write_rows(rows: Sequence[dict], csv_path: str | Path | None = None, json_path: str | Path | None = None) -> None:
    if json_path is not None:
        Path(json_path).write_text(json.dumps(list(rows), indent=1, default=_json_default))
    if csv_path is not None and rows:
        fields = [k for k in rows[0] if not isinstance(rows[0][k], (list, dict))]
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)


def accept_vs_probability(report: DecodeReport) -> list[dict]:
    """Per-sample per-cycle (cumulative probability, accept length) pairs."""
    rows = []
    for k, cyc in enumerate(report.cycles):
        for j, (cp, acc) in enumerate(zip(cyc.cumulative_probs, cyc.accept_lengths)):
            rows.append({"cycle": k, "sample": j, "cumulative_prob": cp, "accept_length": acc})
    return rows


def pearson(rows: Iterable[dict]) -> float:
    """Correlation of cumulative probability and accept length; nan if degenerate."""
    rows = list(rows)
    x = np.array([r["cumulative_prob"] for r in rows])
    y = np.array([r["accept_length"] for r in rows], dtype=float)
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def sweep_max_verify(config: RunConfig, values: Sequence[int]) -> list[dict]:
    """Accept length and speedup as the verification cap ``m`` varies."""
    rows = []
    for m in values:
        report = run(config.with_builder(max_verify=m))
        expected = [e for c in report.cycles for e in c.expected_accepts]
        rows.append(
            {
                "max_verify": m,
                "mean_accept_length": report.mean_accept_length,
                "mean_expected_accept": float(np.nanmean(expected)) if expected else float("nan"),
                "speedup": report.speedup,
            }
        )
    return rows


def trace_figures(
    report: DecodeReport,
    out_dir: str | Path,
    sweep_config: RunConfig | None = None,
    sweep_values: Sequence[int] = (),
) -> dict[str, Path]:
    """Write the figure datasets as CSV; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    pairs = accept_vs_probability(report)
    path = out_dir / "accept_vs_cumprob.csv"
    _write_csv(path, pairs, ["cycle", "sample", "cumulative_prob", "accept_length"])
    written["accept_vs_cumprob"] = path
    if sweep_config is not None and sweep_values:
        rows = sweep_max_verify(sweep_config, sweep_values)
        path = out_dir / "max_verify_sweep.csv"
        _write_csv(path, rows, ["max_verify", "mean_accept_length", "mean_expected_accept", "speedup"])
        written["max_verify_sweep"] = path
    return written


def _write_csv(path: Path, rows: Sequence[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        writer.writeheader()
        writer.writerows(rows)


def calibrate(
    backend: dict,
    batch_size: int,
    bucket_width: int,
    bucket_count: int,
    max_tokens: int,
    repetitions: int,
    out_dir: str | Path,
) -> dict[str, Path]:
    """Measure draft and target tables for one batch size and write them as JSON.

    ``backend`` is ``{"kind": "analytic", "draft": {...}, "target": {...}}``
    (closed-form costs) or ``{"kind": "matmul", "draft": {"d_model", "layers"},
    "target": {...}}`` (wall-clock timing of a numpy workload).
    """
    kind = backend.get("kind", "analytic")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for role in ("draft", "target"):
        params = backend.get(role)
        if params is None:
            raise ConfigError(f"backend spec is missing the {role!r} entry")
        if kind == "analytic":
            measurer = AnalyticCost.from_dict(params)
        elif kind == "matmul":
            measurer = matmul_measurer(**params)
        else:
            raise ConfigError(f"unknown backend kind {kind!r}")
        try:
            table = build_table(
                measurer, batch_size, bucket_width, bucket_count, max_tokens,
                role=role, repetitions=repetitions,
            )
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc
        path = out_dir / f"{role}_B{batch_size}.json"
        save_table(table, path)
        written[role] = path
    return written
