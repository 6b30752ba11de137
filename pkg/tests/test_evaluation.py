from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import metrics_loop
from pvcgn.errors import BaselineError, ConfigError, EmptySliceError
from pvcgn.evaluation import (
    Metrics,
    MetricsReport,
    SliceSpec,
    evaluate,
    format_table,
    ha_baseline,
    ha_predictions,
    metrics,
    report_rows,
    slice_rush_hours,
    slice_top_quartile,
    write_report_csv,
)
from pvcgn.ingest import DayRange, NormStats, RidershipTensor, make_windows, stack_windows, zscore_apply

MONDAY = dt.date(2019, 1, 7)


def test_metrics_examples():
    r = metrics([11.0, 18.0], [10.0, 20.0])
    assert r.rmse == pytest.approx(math.sqrt(2.5), abs=1e-12)
    assert r.mae == pytest.approx(1.5, abs=1e-12)
    assert r.mape == pytest.approx(10.0, abs=1e-12)
    p = metrics([3.0, 4.0], [3.0, 4.0])
    assert (p.rmse, p.mae, p.mape) == (0.0, 0.0, 0.0)


def test_metrics_zero_truth_excluded_from_mape_only():
    r = metrics([11.0, 2.0], [10.0, 0.0])
    assert r.mape == pytest.approx(10.0) and r.mape_excluded == 1
    assert r.mae == pytest.approx(1.5) and r.count == 2
    none = metrics([1.0, 2.0], [0.0, 0.0])
    assert none.mape is None and none.mae == 1.5


def test_metrics_five_entry_fixture():
    truth = np.array([10.0, 20.0, 0.0, 5.0, 40.0])
    pred = np.array([12.0, 15.0, 1.0, 5.0, 44.0])
    r = metrics(pred, truth)
    assert abs(r.rmse - math.sqrt((4 + 25 + 1 + 0 + 16) / 5)) <= 1e-12
    assert abs(r.mae - (2 + 5 + 1 + 0 + 4) / 5) <= 1e-12
    assert abs(r.mape - 100 * (0.2 + 0.25 + 0.0 + 0.1) / 4) <= 1e-12


@given(
    arrays(np.float64, 12, elements=st.floats(0, 500)),
    arrays(np.float64, 12, elements=st.one_of(st.just(0.0), st.floats(0.5, 500))),
    st.sampled_from([0.0, 10.0]),
    st.booleans(),
)
@example(np.full(12, 2.225073858507203e-309), np.zeros(12), 0.0, False)  # subnormal errors
def test_metrics_loop_oracle(pred, truth, floor, inclusive):
    r = metrics(pred, truth, floor, inclusive)
    rmse, mae, mape = metrics_loop(pred, truth, floor, inclusive)
    assert r.rmse == pytest.approx(rmse, rel=1e-12, abs=1e-12)
    assert r.mae == pytest.approx(mae, rel=1e-12, abs=1e-12)
    assert (r.mape is None) == (mape is None)
    if mape is not None:
        assert r.mape == pytest.approx(mape, rel=1e-10)
    assert r.rmse >= r.mae * (1 - 1e-12)


def _tensor(n_days, bins_per_day=8, n=3, first_minute=6 * 60, seed=0):
    rng = np.random.default_rng(seed)
    days = tuple(
        DayRange(MONDAY + dt.timedelta(days=k), k * bins_per_day, (k + 1) * bins_per_day, first_minute)
        for k in range(n_days)
    )
    values = rng.poisson(30, size=(n_days * bins_per_day, n, 2)).astype(float)
    return RidershipTensor(values, 15, days)


def test_evaluate_perfect_and_counts():
    t = _tensor(2)
    ws = make_windows(t, 2, 4)
    _, y, _ = stack_windows(ws)
    rep = evaluate(y, ws, None)
    assert all((h.rmse, h.mae, h.mape) == (0.0, 0.0, 0.0) for h in rep.horizons)
    assert all(h.count == len(ws) * 3 * 2 for h in rep.horizons)


def test_evaluate_horizon_separation():
    t = _tensor(2)
    ws = make_windows(t, 2, 4)
    _, y, _ = stack_windows(ws)
    noisy = y.copy()
    noisy[:, 1:] += 7.0
    rep = evaluate(noisy, ws, None)
    assert rep.horizons[0].mae == 0.0 and rep.horizons[1].mae == 7.0


def test_evaluate_inverts_normalized_predictions():
    t = _tensor(1, bins_per_day=7)
    ws = make_windows(t, 2, 4)[:2]  # 2 windows, 3 stations
    _, y, _ = stack_windows(ws)
    stats = NormStats(25.0, 4.0)
    pred = y + np.random.default_rng(1).normal(0, 3, size=y.shape)
    rep = evaluate(zscore_apply(pred, stats), ws, stats)
    for h in range(4):
        rmse, mae, mape = metrics_loop(pred[:, h], y[:, h])
        assert abs(rep.horizons[h].rmse - rmse) <= 1e-9 and abs(rep.horizons[h].mae - mae) <= 1e-9
        assert abs(rep.horizons[h].mape - mape) <= 1e-9
    direct = evaluate(pred, ws, None)
    assert all(abs(a.mae - b.mae) <= 1e-9 for a, b in zip(direct.horizons, rep.horizons))


@dataclass
class Anchor:
    t_anchor: int


def test_rush_boundaries_and_daily_count():
    t = _tensor(2, bins_per_day=72, first_minute=5 * 60 + 30)
    clocks = t.bin_clocks()

    def at(minute):
        return Anchor(int(np.flatnonzero(clocks == minute)[0]) - 1)

    mask = slice_rush_hours([at(7 * 60 + 30), at(9 * 60 + 30), at(9 * 60 + 15)], t, 1)
    assert mask[:, 0].tolist() == [True, False, True]
    # every bin of both days as a horizon-1 target
    every = [Anchor(k - 1) for k in range(1, t.T)]
    mask = slice_rush_hours(every, t, 1)
    assert int(mask.sum()) == 2 * 16


def test_rush_slice_in_evaluate():
    t = _tensor(1, bins_per_day=72, first_minute=5 * 60 + 30)
    ws = make_windows(t, 4, 4)
    _, y, _ = stack_windows(ws)
    rep = evaluate(y + 1, ws, None, SliceSpec.from_name("rush"), tensor=t)
    assert all(h.count == 16 * 3 * 2 for h in rep.horizons)
    assert rep.slice == "rush"
    with pytest.raises(EmptySliceError):
        evaluate(y, ws, None, SliceSpec("rush_hours", ((0, 60),)), tensor=t)


def test_top_quartile():
    t = _tensor(3, n=8, seed=2)
    assert slice_top_quartile(t, 1.0).tolist() == list(range(8))
    top = slice_top_quartile(t, 0.25)
    totals = t.values.sum(axis=(0, 2))
    oracle = sorted(range(8), key=lambda i: (-totals[i], i))[:2]
    assert top.tolist() == sorted(oracle)
    ties = RidershipTensor(np.ones((8, 8, 2)), 15, t.days[:1])
    assert slice_top_quartile(ties, 0.25).tolist() == [0, 1]
    with pytest.raises(ConfigError):
        slice_top_quartile(t, 0.0)


def test_ha_examples():
    t = _tensor(15, n=1)
    v = t.values
    v[0 * 8 + 2, 0] = [10, 10]
    v[7 * 8 + 2, 0] = [20, 20]
    minute = 6 * 60 + 30
    assert ha_baseline(t, MONDAY + dt.timedelta(days=14), minute, 2)[0].tolist() == [15, 15]
    assert ha_baseline(t, MONDAY + dt.timedelta(days=14), minute, 1)[0].tolist() == [20, 20]
    with pytest.raises(BaselineError):
        ha_baseline(t, MONDAY, minute, 2)


def test_ha_calendar_oracle():
    t = _tensor(28, n=2, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(20):
        k = int(rng.integers(1, 4))
        day = int(rng.integers(7, 28))
        b = int(rng.integers(0, 8))
        date = MONDAY + dt.timedelta(days=day)
        prior = [d for d in range(day - 1, -1, -1) if (MONDAY + dt.timedelta(days=d)).weekday() == date.weekday()][:k]
        want = np.mean([t.values[d * 8 + b] for d in prior], axis=0)
        assert np.allclose(ha_baseline(t, date, 6 * 60 + 15 * b, k), want, atol=1e-12)


def test_ha_ignores_other_cells():
    t = _tensor(15, n=2, seed=5)
    date = MONDAY + dt.timedelta(days=14)
    before = ha_baseline(t, date, 6 * 60 + 45, 2)
    for d in range(15):
        if d % 7:
            t.values[d * 8 : (d + 1) * 8] = -1
    t.values[7 * 8 + 0] = -5  # same weekday, other bin
    assert np.array_equal(ha_baseline(t, date, 6 * 60 + 45, 2), before)


def test_ha_predictions_shape():
    t = _tensor(15)
    ws = [w for w in make_windows(t, 2, 2) if w.t_anchor >= 7 * 8]
    out = ha_predictions(t, ws, 2, 2)
    assert out.shape == (len(ws), 2, 3, 2)
    w = ws[0]
    date = t.bin_dates()[w.t_anchor + 1]
    assert np.array_equal(out[0, 0], ha_baseline(t, date, int(t.bin_clocks()[w.t_anchor + 1]), 2))


def test_reports_csv_and_table(tmp_path):
    reps = [
        MetricsReport("pvcgn", "whole", [Metrics(2.0, 1.0, 5.0, 10, 0)] * 4),
        MetricsReport("ha2", "whole", [Metrics(3.0, 2.0, None, 10, 10)] * 4),
    ]
    rows = report_rows(reps)
    assert rows[0] == ["horizon", "metric", "pvcgn[whole]", "ha2[whole]"] and len(rows) == 13
    write_report_csv(tmp_path / "r.csv", reps)
    back = list(csv.reader(open(tmp_path / "r.csv")))
    assert back == rows and back[3][3] == "N/A"
    table = format_table(reps, 15)
    assert "60 min" in table and "5.00%" in table
    with pytest.raises(AssertionError):
        MetricsReport("bad", "whole", [Metrics(1.0, 2.0, None, 1, 0)]).check()


def test_slice_spec_validation():
    with pytest.raises(ConfigError):
        SliceSpec.from_name("evening")
    with pytest.raises(ConfigError):
        SliceSpec(fraction=1.5)
    assert SliceSpec.from_name("top25").label == "top"
