import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moirai2.decoding import QuantileForecast
from moirai2.evaluation import (
    AggregationError,
    BaselineError,
    EvalRecord,
    EvalTask,
    UndefinedMaseError,
    aggregate,
    crps_from_quantiles,
    geometric_mean,
    load_tasks,
    mase,
    on_levels,
    run_eval,
    seasonal_naive,
    seasonal_naive_forecaster,
    split_task,
    write_tasks,
)
from moirai2.model import DEFAULT_LEVELS
from moirai2.objective import pinball
from moirai2.series import Series


class TestSeasonalNaive:
    def test_example(self):
        point, qf = seasonal_naive(Series("s", np.array([1.0, 2.0, 3.0, 4.0]), season_length=2), 3)
        assert point.tolist() == [3, 4, 3]
        assert (qf.values == np.array([[3], [4], [3]])).all()

    def test_period_one_repeats_last(self):
        point, _ = seasonal_naive(Series("s", np.array([5.0, 6.0]), season_length=1), 4)
        assert point.tolist() == [6, 6, 6, 6]

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = int(rng.integers(1, 10))
            c = int(rng.integers(s, 40))
            h = int(rng.integers(1, 30))
            y = rng.standard_normal(c)
            ext = list(y)
            for _ in range(h):
                ext.append(ext[-s])
            point, _ = seasonal_naive(Series("s", y, season_length=s), h)
            assert point.tolist() == ext[c:]

    def test_short_context(self):
        with pytest.raises(BaselineError):
            seasonal_naive(Series("s", np.ones(3), season_length=4), 2)


def _mase_reference(y, yhat, ctx, s):
    scale = sum(abs(ctx[t] - ctx[t - s]) for t in range(s, len(ctx))) / (len(ctx) - s)
    return sum(abs(a - b) for a, b in zip(y, yhat)) / len(y) / scale


class TestMase:
    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            s = int(rng.integers(1, 8))
            ctx = rng.standard_normal(int(rng.integers(s + 1, 50))).tolist()
            y = rng.standard_normal(10).tolist()
            yhat = rng.standard_normal(10).tolist()
            assert mase(y, yhat, ctx, s) == pytest.approx(_mase_reference(y, yhat, ctx, s), rel=1e-9)

    def test_perfect_forecast(self):
        assert mase([1.0, 2.0], [1.0, 2.0], [0.0, 1.0, 0.0], 1) == 0.0

    def test_constant_context_undefined(self):
        with pytest.raises(UndefinedMaseError):
            mase([1.0], [0.0], [2.0, 2.0, 2.0], 1)


class TestCrps:
    def test_all_zero_quantiles_unit_target(self):
        qf = QuantileForecast(DEFAULT_LEVELS, np.zeros((1, 9)))
        assert crps_from_quantiles([1.0], qf) == pytest.approx(1.0)

    def test_perfect(self):
        qf = QuantileForecast(DEFAULT_LEVELS, np.full((3, 9), 2.0))
        assert crps_from_quantiles([2.0, 2.0, 2.0], qf) == 0.0

    def test_point_forecast_is_absolute_error(self):
        qf = QuantileForecast(DEFAULT_LEVELS, np.full((2, 9), 1.0))
        assert crps_from_quantiles([3.0, -1.0], qf) == pytest.approx(2.0)

    def test_matches_pinball_definition(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            y = rng.standard_normal(6)
            vals = np.sort(rng.standard_normal((6, 9)), axis=1)
            ref = np.mean([2 / 9 * sum(pinball(y[t], vals[t, i], q) for i, q in enumerate(DEFAULT_LEVELS))
                           for t in range(6)])
            got = crps_from_quantiles(y, QuantileForecast(DEFAULT_LEVELS, vals))
            assert got == pytest.approx(ref, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            crps_from_quantiles([1.0, 2.0], QuantileForecast(DEFAULT_LEVELS, np.zeros((1, 9))))


class TestAggregate:
    def test_reciprocal_pair(self):
        recs = [EvalRecord("a", 0.5, 0.5, 1.0, 1.0), EvalRecord("b", 2.0, 2.0, 1.0, 1.0)]
        agg = aggregate(recs)
        assert agg["agg_mase"] == pytest.approx(1.0) and agg["agg_crps"] == pytest.approx(1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20), st.floats(0.01, 100))
    def test_scale_equivariant(self, xs, c):
        assert geometric_mean([c * x for x in xs]) == pytest.approx(c * geometric_mean(xs), rel=1e-9)

    @pytest.mark.parametrize("xs", [[], [1.0, 0.0], [1.0, -2.0]])
    def test_rejects(self, xs):
        with pytest.raises(AggregationError):
            geometric_mean(xs)


def _tasks(n=6, length=120, horizon=24, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    return [split_task(Series(f"t{i}", np.sin(2 * np.pi * t / 24) * (i + 1) + rng.standard_normal(length)), horizon)
            for i in range(n)]


def test_naive_model_scores_one(tmp_path):
    out = tmp_path / "report.csv"
    recs = run_eval(seasonal_naive_forecaster(), _tasks(), out)
    agg = aggregate(recs)
    assert agg["agg_mase"] == pytest.approx(1.0, abs=1e-9)
    assert agg["agg_crps"] == pytest.approx(1.0, abs=1e-9)
    rows = list(csv.reader(out.open()))
    assert rows[0][0] == "task_id" and rows[-1][0] == "aggregate"
    assert [r[0] for r in rows[1:-1]] == sorted(f"t{i}" for i in range(6))


def test_empty_task_list(tmp_path):
    out = tmp_path / "r.csv"
    assert run_eval(seasonal_naive_forecaster(), [], out) == []
    rows = list(csv.reader(out.open()))
    assert len(rows) == 2 and rows[1][0] == "aggregate"


def test_failing_task_is_skipped():
    tasks = _tasks(2) + [EvalTask("flat", Series("flat", np.ones(48)), np.ones(4))]
    skipped = []
    recs = run_eval(seasonal_naive_forecaster(), tasks, skipped=skipped)
    assert len(recs) == 2 and skipped[0][0] == "flat"


def test_task_file_round_trip(tmp_path):
    series = [Series(f"s{i}", np.arange(50.0) + i) for i in range(3)]
    path = tmp_path / "tasks.ndjson"
    write_tasks(path, series, 10)
    tasks = load_tasks(path)
    assert [t.task_id for t in tasks] == ["s0", "s1", "s2"]
    assert len(tasks[0].context) == 40 and tasks[0].targets.tolist() == list(range(40, 50))


def test_split_task_too_short():
    with pytest.raises(ValueError):
        split_task(Series("s", np.ones(5)), 5)


def test_on_levels_broadcasts_single_level():
    qf = QuantileForecast((0.5,), np.array([[1.0], [2.0]]))
    out = on_levels(qf, DEFAULT_LEVELS)
    assert out.values.shape == (2, 9) and (out.values[1] == 2.0).all()


def test_periodic_series_zero_naive_error():
    y = np.tile([1.0, 5.0, 2.0], 10)
    task = split_task(Series("p", y, season_length=3), 6)
    point, _ = seasonal_naive(task.context, 6)
    assert np.array_equal(point, task.targets)


def test_mase_scale_invariant():
    rng = np.random.default_rng(4)
    ctx, y, f = rng.standard_normal(30), rng.standard_normal(5), rng.standard_normal(5)
    assert mase(2 * y, 2 * f, 2 * ctx, 3) == pytest.approx(mase(y, f, ctx, 3), rel=1e-12)


def test_crps_affine():
    rng = np.random.default_rng(5)
    for _ in range(20):
        y = rng.standard_normal(4)
        vals = np.sort(rng.standard_normal((4, 9)), axis=1)
        a, b = rng.uniform(0.1, 10), rng.standard_normal()
        base = crps_from_quantiles(y, QuantileForecast(DEFAULT_LEVELS, vals))
        moved = crps_from_quantiles(a * y + b, QuantileForecast(DEFAULT_LEVELS, a * vals + b))
        assert moved == pytest.approx(a * base, rel=1e-9)


def test_aggregate_single_and_parity():
    assert aggregate([EvalRecord("a", 3.0, 1.0, 2.0, 4.0)]) == pytest.approx({"agg_mase": 1.5, "agg_crps": 0.25})
    assert geometric_mean([1.0] * 7) == 1.0


def test_report_rows_match_scored_tasks(tmp_path):
    tasks = _tasks(3) + [EvalTask("flat", Series("flat", np.ones(48)), np.ones(4))]
    out = tmp_path / "r.csv"
    skipped = []
    recs = run_eval(seasonal_naive_forecaster(), tasks, out, skipped=skipped)
    assert len(list(csv.reader(out.open()))) - 2 == len(tasks) - len(skipped) == len(recs)


def test_single_median_level_crps_is_mae():
    rng = np.random.default_rng(6)
    y = rng.standard_normal(20)
    f = rng.standard_normal(20)
    got = crps_from_quantiles(y, QuantileForecast((0.5,), f[:, None]))
    assert got == np.mean(np.abs(y - f))


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(7)
    recs = [EvalRecord(str(i), *rng.uniform(0.1, 3, 4)) for i in range(15)]
    ref = aggregate(recs)
    for _ in range(10):
        assert aggregate([recs[i] for i in rng.permutation(15)]) == ref
