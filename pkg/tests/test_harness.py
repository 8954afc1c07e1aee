import csv
import json

import numpy as np
import pytest

from castree.cost_model import AnalyticCost, load_table
from castree.harness import (
    ConfigError,
    DecodeReport,
    RunConfig,
    ablation_configs,
    accept_vs_probability,
    build_costs,
    calibrate,
    compare,
    pearson,
    run,
    sweep_max_verify,
    trace_figures,
    vanilla_time,
)
from castree.tree_builder import BuilderConfig

FLAT_COSTS = {
    "bucket_width": 128,
    "bucket_count": 4,
    "max_tokens": 32,
    "target": {"base": 20.0, "linear_coef": 0.5},
    "draft": {"base": 2.0, "linear_coef": 0.1},
}


def small(**changes):
    cfg = RunConfig(
        target={"kind": "table", "vocab": 16, "order": 2, "seed": 1, "concentration": 0.3},
        draft={"kind": "smoothed", "beta": 0.3},
        builder=BuilderConfig(top_k=4, max_depth=5, max_verify=16, breadth_threshold=1.0,
                              depth_threshold=1.0, rerank_threshold=0.5),
        prompts={"count": 4, "length": 8, "seed": 2},
        max_new_tokens=24,
        costs=FLAT_COSTS,
    )
    return cfg.replace(**changes)


class TestRun:
    def test_vanilla_speedup_is_one(self):
        report = run(small(method="vanilla", batch_size=2))
        assert report.speedup == pytest.approx(1.0)
        assert all(len(o) == 24 for o in report.outputs)

    def test_perfect_draft_chain(self):
        d = 4
        cfg = small(method="chain-spd", chain_length=d, draft={"kind": "smoothed", "beta": 0.0},
                    max_new_tokens=5 * (d + 1))
        report = run(cfg)
        f_t = AnalyticCost(20.0, linear_coef=0.5)
        f_d = AnalyticCost(2.0, linear_coef=0.1)
        expected = (d + 1) * f_t(1, 0, 1) / (d * f_d(1, 0, 1) + f_t(1, 0, d + 1))
        assert report.mean_accept_length == d
        assert report.speedup == pytest.approx(expected)

    @pytest.mark.parametrize("method", ["chain-spd", "fixed-tree", "eagle2-style", "cast"])
    def test_deterministic(self, method):
        a, b = run(small(method=method, batch_size=2)), run(small(method=method, batch_size=2))
        assert a.outputs == b.outputs
        assert a.speedup == b.speedup

    @pytest.mark.parametrize("method", ["chain-spd", "fixed-tree", "eagle2-style", "cast"])
    def test_greedy_matches_vanilla(self, method):
        vanilla = run(small(method="vanilla", temperature=0))
        other = run(small(method=method, temperature=0, batch_size=2))
        assert other.outputs == vanilla.outputs

    def test_wall_clock(self):
        report = run(small(method="cast", clock="wall", max_new_tokens=8))
        assert report.method_time_ms > 0 and report.vanilla_time_ms > 0

    def test_vanilla_time_closed_form(self):
        costs = build_costs(small())
        assert vanilla_time(costs, 10, 3) == pytest.approx(3 * (20.0 + 0.5))

    def test_report_round_trip(self, tmp_path):
        report = run(small(batch_size=2))
        report.save(tmp_path / "r.json")
        back = DecodeReport.load(tmp_path / "r.json")
        assert back.outputs == report.outputs
        assert back.speedup == pytest.approx(report.speedup)
        assert back.cycles[0].trace == report.cycles[0].trace

    def test_table_costs_must_match_batch(self, tmp_path):
        paths = calibrate({"kind": "analytic", "draft": {"base": 1.0}, "target": {"base": 5.0}},
                          2, 64, 2, 32, 1, tmp_path)
        cfg = small(costs={"tables": {k: str(v) for k, v in paths.items()}})
        with pytest.raises(ConfigError):
            run(cfg)
        assert run(cfg.replace(batch_size=2)).speedup > 0


class TestConfig:
    def test_unknown_fields(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"method": "cast", "beam": 3})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"builder": {"top_k": 4, "width": 2}})

    @pytest.mark.parametrize("kw", [dict(method="beam"), dict(temperature=0.5), dict(clock="gpu"), dict(batch_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)

    def test_json_round_trip(self, tmp_path):
        cfg = small(name="x", batch_size=2)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert RunConfig.load(path) == cfg

    def test_toggle(self):
        cfg = small().toggled("dr", "bp")
        assert not cfg.builder.enable_dr and not cfg.builder.enable_bp and cfg.builder.enable_dp
        with pytest.raises(ConfigError):
            small().toggled("xx")

    def test_table_too_small_for_verification(self):
        with pytest.raises(ConfigError):
            run(small(builder=BuilderConfig(max_verify=40)))


class TestCompare:
    def test_empty(self):
        with pytest.raises(ConfigError):
            compare([])

    def test_mismatched_prompts(self):
        with pytest.raises(ConfigError):
            compare([small(), small(prompts={"count": 2, "length": 8, "seed": 9})])

    def test_ablation_rows(self):
        configs = ablation_configs(small(batch_size=2))
        assert [c.label for c in configs] == ["cast", "cast-no-dr", "cast-no-dp", "cast-no-bp"]
        rows = compare(configs)
        assert len(rows) == 4
        assert [(r["enable_dr"], r["enable_dp"], r["enable_bp"]) for r in rows] == [
            (True, True, True), (False, True, True), (True, False, True), (True, True, False),
        ]
        assert ablation_configs(small(), include_baseline=True)[0].method == "fixed-tree"


class TestFigures:
    def test_pairs_and_sweep(self, tmp_path):
        report = run(small(batch_size=2))
        rows = accept_vs_probability(report)
        assert len(rows) == sum(len(c.accept_lengths) for c in report.cycles)
        assert -1.0 <= pearson(rows) <= 1.0
        written = trace_figures(report, tmp_path, small(method="eagle2-style"), [1, 4])
        with open(written["accept_vs_cumprob"]) as fh:
            assert len(list(csv.DictReader(fh))) == len(rows)
        with open(written["max_verify_sweep"]) as fh:
            assert [int(r["max_verify"]) for r in csv.DictReader(fh)] == [1, 4]

    def test_pearson_degenerate(self):
        rows = [{"cumulative_prob": 0.5, "accept_length": 1}] * 3
        assert np.isnan(pearson(rows))

    def test_sweep_accept_grows(self):
        rows = sweep_max_verify(small(method="eagle2-style", max_new_tokens=48), [1, 16])
        assert rows[1]["mean_accept_length"] >= rows[0]["mean_accept_length"]


class TestCalibrate:
    def test_analytic_tables(self, tmp_path):
        backend = {"kind": "analytic",
                   "draft": {"base": 1.0, "linear_coef": 0.1},
                   "target": {"base": 10.0, "context_coef": 0.01, "linear_coef": 0.5, "knee": 8}}
        paths = calibrate(backend, 4, 32, 3, 16, 3, tmp_path)
        target = load_table(paths["target"])
        f = AnalyticCost(10.0, context_coef=0.01, linear_coef=0.5, knee=8)
        expected = [[f(4, k * 32, n) for n in range(1, 17)] for k in (1, 2, 3)]
        np.testing.assert_allclose(target.grid, expected)
        assert paths["draft"].name == "draft_B4.json"

    def test_matmul_backend(self, tmp_path):
        backend = {"kind": "matmul", "draft": {"d_model": 16, "layers": 1}, "target": {"d_model": 32, "layers": 1}}
        paths = calibrate(backend, 1, 8, 2, 4, 1, tmp_path)
        assert np.all(np.diff(load_table(paths["target"]).grid, axis=1) >= 0)

    def test_bad_parameters(self, tmp_path):
        backend = {"kind": "analytic", "draft": {"base": 1.0}, "target": {"base": 2.0}}
        with pytest.raises(ConfigError):
            calibrate(backend, 1, 32, 0, 16, 1, tmp_path)
        with pytest.raises(ConfigError):
            calibrate({"kind": "gpu", "draft": {}, "target": {}}, 1, 32, 1, 16, 1, tmp_path)
        with pytest.raises(ConfigError):
            calibrate({"kind": "analytic", "draft": {"base": 1.0}}, 1, 32, 1, 16, 1, tmp_path)
