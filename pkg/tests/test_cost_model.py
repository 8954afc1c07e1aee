import json

import numpy as np
import pytest

from castree.cost_model import (
    AnalyticCost,
    CalibrationError,
    ConfigurationError,
    CostPair,
    CostTable,
    ParameterError,
    TableLoadError,
    build_table,
    draft_cost_row,
    load_table,
    monotone_repair,
    normalized_draft_cost,
    normalized_target_cost,
    save_table,
    select_bucket,
)


def affine(b, c, n):
    return 1.0 + 0.5 * n


def table(rows, role="target", width=128):
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    return CostTable(role, 1, width, rows.shape[0], rows.shape[1], rows)


class TestBuildTable:
    def test_constant_measurer(self):
        t = build_table(lambda b, c, n: 2.0, 1, 128, 3, 5)
        assert np.all(t.grid == 2.0)
        assert t.grid.shape == (3, 5)

    def test_affine_row(self):
        t = build_table(affine, 1, 128, 1, 4)
        np.testing.assert_allclose(t.grid[0], [1.5, 2.0, 2.5, 3.0])

    def test_noisy_median_within_one_percent(self):
        noisy = AnalyticCost(base=3.0, linear_coef=0.2, context_coef=0.001, jitter=0.01, seed=4)
        t = build_table(noisy, 2, 64, 4, 16, repetitions=9)
        clean = np.array([[noisy.exact(2, k * 64, n) for n in range(1, 17)] for k in range(1, 5)])
        np.testing.assert_array_less(np.abs(t.grid - clean), 0.01 * clean)

    def test_monotone_repair_applied(self):
        values = iter([3.0, 2.0, 4.0, 1.0])
        t = build_table(lambda b, c, n: next(values), 1, 10, 1, 4)
        np.testing.assert_array_equal(t.grid[0], [3.0, 3.0, 4.0, 4.0])

    def test_grid_indexing_uses_bucket_context(self):
        seen = []
        build_table(lambda b, c, n: seen.append((b, c, n)) or 1.0, 4, 32, 2, 2)
        assert seen == [(4, 32, 1), (4, 32, 2), (4, 64, 1), (4, 64, 2)]

    @pytest.mark.parametrize("value", [0.0, -1.0, float("nan")])
    def test_non_positive_measurement(self, value):
        with pytest.raises(CalibrationError):
            build_table(lambda b, c, n: value, 1, 8, 2, 2)

    @pytest.mark.parametrize("kw", [dict(bucket_count=0), dict(bucket_width=0), dict(max_tokens=0)])
    def test_zero_dimensions(self, kw):
        args = dict(batch_size=1, bucket_width=8, bucket_count=2, max_tokens=2) | kw
        with pytest.raises(ParameterError):
            build_table(affine, **args)

    def test_zero_repetitions(self):
        with pytest.raises(ParameterError):
            build_table(affine, 1, 8, 2, 2, repetitions=0)

    def test_grid_read_only(self):
        t = build_table(affine, 1, 8, 1, 2)
        with pytest.raises(ValueError):
            t.grid[0, 0] = 5.0


class TestSelectBucket:
    t = build_table(affine, 1, 128, 8, 2)

    @pytest.mark.parametrize("c, k", [(0, 1), (127, 1), (128, 2), (300, 3), (5000, 8), (1023, 8)])
    def test_examples(self, c, k):
        assert select_bucket(self.t, c) == k

    def test_monotone_and_saturating(self):
        ks = [select_bucket(self.t, c) for c in range(0, 3000, 7)]
        assert ks == sorted(ks)
        assert max(ks) == 8


class TestRowsAndNormalization:
    def test_draft_row(self):
        d = build_table(affine, 1, 128, 1, 4, role="draft")
        for c in (0, 50, 10_000):
            np.testing.assert_allclose(draft_cost_row(d, c), [1.5, 2.0, 2.5, 3.0])

    def test_draft_row_two_buckets(self):
        d = table([[1, 2], [3, 4]], role="draft", width=10)
        np.testing.assert_array_equal(draft_cost_row(d, 0), [1, 2])
        np.testing.assert_array_equal(draft_cost_row(d, 9), [1, 2])
        np.testing.assert_array_equal(draft_cost_row(d, 10), [3, 4])

    def test_draft_row_rejects_target_table(self):
        with pytest.raises(ConfigurationError):
            draft_cost_row(table([[1, 2]]), 0)

    def test_normalized_draft_constant(self):
        d = table(np.ones((2, 3)), role="draft")
        t = table(np.full((2, 3), 4.0))
        for c in (0, 200):
            for k in (1, 2, 3):
                assert normalized_draft_cost(d, t, c, k) == 0.25

    def test_normalized_draft_ratio(self):
        d = table([[1.5, 2.0, 2.5, 3.0]], role="draft")
        t = table([[6.0, 6.6, 7.8, 9.0]])
        assert normalized_draft_cost(d, t, 0, 3) == pytest.approx(2.5 / 6.0)

    def test_normalized_draft_self_ratio(self):
        rows = [[1.5, 2.0, 2.5, 3.0]]
        assert normalized_draft_cost(table(rows, "draft"), table(rows), 0, 1) == 1.0

    def test_normalized_draft_mismatch(self):
        with pytest.raises(ConfigurationError):
            normalized_draft_cost(table([[1, 2]], "draft"), table([[1, 2, 3]]), 0, 1)

    def test_normalized_target(self):
        t = table([[6.0, 6.6, 7.8, 9.0]])
        assert normalized_target_cost(t, 0, 1) == 1.0
        assert normalized_target_cost(t, 0, 4) == pytest.approx(1.5)
        flat = table(np.full((1, 5), 3.3))
        assert all(normalized_target_cost(flat, 0, k) == 1.0 for k in range(1, 6))

    def test_token_count_bounds(self):
        t = table([[1.0, 2.0]])
        for k in (0, 3):
            with pytest.raises(ParameterError):
                normalized_target_cost(t, 0, k)

    def test_curves_match_scalar_versions(self):
        d = build_table(AnalyticCost(1.0, linear_coef=0.3), 2, 16, 3, 6, role="draft")
        t = build_table(AnalyticCost(5.0, linear_coef=0.7, knee=4), 2, 16, 3, 6)
        pair = CostPair(d, t)
        for c in (0, 20, 40):
            np.testing.assert_allclose(
                pair.draft_curve(c, 6), [normalized_draft_cost(d, t, c, k) for k in range(1, 7)]
            )
            np.testing.assert_allclose(
                pair.target_curve(c, 6), [normalized_target_cost(t, c, k) for k in range(1, 7)]
            )

    def test_pair_validates(self):
        with pytest.raises(ConfigurationError):
            CostPair(table([[1, 2]], "target"), table([[1, 2]], "target"))
        with pytest.raises(ConfigurationError):
            CostPair(table([[1, 2]], "draft"), table([[1, 2, 3]], "target"))

    def test_monotone_repair(self):
        np.testing.assert_array_equal(monotone_repair([[2, 1, 3], [1, 1, 0]]), [[2, 2, 3], [1, 1, 1]])


class TestPersistence:
    def test_round_trip(self, tmp_path):
        t = build_table(AnalyticCost(1.0, linear_coef=0.1, context_coef=0.01), 4, 32, 3, 5, role="draft")
        save_table(t, tmp_path / "t.json")
        back = load_table(tmp_path / "t.json")
        assert back.grid.tobytes() == t.grid.tobytes()
        assert (back.role, back.batch_size, back.bucket_width, back.bucket_count, back.max_tokens) == (
            "draft", 4, 32, 3, 5,
        )

    def _payload(self, **changes):
        payload = dict(role="target", batch_size=1, bucket_width=8, bucket_count=2, max_tokens=2,
                       grid=[1.0, 2.0, 3.0, 4.0], unit="ms")
        payload.update(changes)
        return payload

    def test_negative_cell_names_coordinates(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(self._payload(grid=[1.0, 2.0, -3.0, 4.0])))
        with pytest.raises(TableLoadError, match=r"bucket=2, tokens=1"):
            load_table(path)

    def test_cell_count_mismatch(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(self._payload(grid=[1.0, 2.0, 3.0])))
        with pytest.raises(TableLoadError, match="grid"):
            load_table(path)

    @pytest.mark.parametrize("field, value", [("role", "oracle"), ("bucket_count", 0), ("unit", "s")])
    def test_bad_field_named(self, tmp_path, field, value):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(self._payload(**{field: value})))
        with pytest.raises(TableLoadError, match=field):
            load_table(path)

    def test_missing_field(self, tmp_path):
        payload = self._payload()
        del payload["max_tokens"]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(payload))
        with pytest.raises(TableLoadError, match="max_tokens"):
            load_table(path)

    def test_unreadable(self, tmp_path):
        with pytest.raises(TableLoadError):
            load_table(tmp_path / "missing.json")
        (tmp_path / "junk.json").write_text("{not json")
        with pytest.raises(TableLoadError):
            load_table(tmp_path / "junk.json")


class TestAnalyticCost:
    def test_closed_form(self):
        f = AnalyticCost(base=2.0, context_coef=0.01, linear_coef=0.5, quadratic_coef=0.1, knee=4)
        # B=2, c=100, n=5: w = 10 - 4 = 6
        assert f(2, 100, 5) == pytest.approx(2.0 + 0.01 * 200 + 0.5 * 6 + 0.1 * 36)
        assert f(2, 0, 2) == 2.0

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(ParameterError):
            AnalyticCost.from_dict({"base": 1.0, "slope": 2.0})

    def test_invalid(self):
        with pytest.raises(ParameterError):
            AnalyticCost(base=0.0)
        with pytest.raises(ParameterError):
            AnalyticCost(linear_coef=-1.0)
