import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fastcar.metrics import (
    MetricsReport,
    accuracy,
    mae,
    mape,
    mean_pm_std,
    mse,
    range_collapsed,
    read_metrics,
    within_fraction,
    write_metrics,
)


def _hits(n, wrong):
    truth = np.zeros(n, dtype=int)
    preds = truth.copy()
    preds[:wrong] = 1
    return preds, truth


def test_accuracy_counts():
    assert round(accuracy(*_hits(651, 3)), 2) == 99.54
    # same error count on a 648-row test split
    assert round(accuracy(*_hits(648, 3)), 2) == 99.54
    assert accuracy([1, 2], [1, 2]) == 100.0


def test_mape_single():
    assert mape([102.0], [100.0]) == pytest.approx(2.0)


def test_mape_constant_predictor_loop_oracle(default_splits):
    truth = default_splits[2].y
    preds = np.full_like(truth, 610.0)
    ref = 0.0
    for p, t in zip(preds, truth):
        ref += abs(t - p) / abs(t)
    assert mape(preds, truth) == pytest.approx(100 * ref / len(truth), rel=1e-12)


def test_mape_zero_truth():
    with pytest.raises(ValueError, match="zero"):
        mape([1.0], [0.0])


def test_within_fraction():
    assert within_fraction([108.0, 100.0], [100.0, 100.0]) == 1.0
    assert within_fraction([108.1, 100.0], [100.0, 100.0]) == 0.5
    assert within_fraction([50.0], [100.0], pct=50) == 1.0


def test_mse_mae():
    assert mse([1, 3], [0, 0]) == 5.0
    assert mae([1, -3], [0, 0]) == 2.0


@pytest.mark.parametrize("fn", [accuracy, mse, mae, mape, within_fraction])
def test_length_mismatch_and_empty(fn):
    with pytest.raises(ValueError, match="mismatch"):
        fn([1, 2], [1])
    with pytest.raises(ValueError, match="empty"):
        fn([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(1, 1e3), st.floats(1, 1e3)), min_size=1, max_size=40), st.randoms())
def test_permutation_invariance(pairs, rnd):
    p, t = map(np.array, zip(*pairs))
    order = list(range(len(p)))
    rnd.shuffle(order)
    for fn in (mse, mae, mape, within_fraction):
        assert fn(p[order], t[order]) == pytest.approx(fn(p, t), rel=1e-12, abs=1e-12)


def test_accuracy_relabel_invariance():
    rng = np.random.default_rng(0)
    p, t = rng.integers(0, 6, 200), rng.integers(0, 6, 200)
    perm = rng.permutation(6)
    assert accuracy(perm[p], perm[t]) == accuracy(p, t)


def test_range_collapse():
    truth = np.linspace(179, 1146, 100)
    assert range_collapsed(np.full(100, 610.0), truth)
    assert range_collapsed(np.linspace(600, 620, 100), truth)
    assert not range_collapsed(truth + 5, truth)
    assert not range_collapsed(np.ones(3), np.full(3, 2.0))


def test_report_compute_and_round_trip(tmp_path):
    r = MetricsReport.compute([0, 1], [0, 0], [100.0, 200.0], [100.0, 100.0], 1.5, note=1)
    assert r.accuracy_pct == 50.0 and r.mape_pct == 50.0 and r.within_8pct_fraction == 0.5
    assert r.extra == {"note": 1}
    path = tmp_path / "m.json"
    write_metrics(path, r, model="x", seed=3)
    doc = read_metrics(path)
    assert doc["model"] == "x" and doc["seed"] == 3
    assert list(doc) == sorted(doc)
    assert MetricsReport.from_dict(doc) == r


def test_report_rejects_nan():
    with pytest.raises(ValueError, match="mse"):
        MetricsReport(100.0, float("nan"), 0.0, 0.0, 1.0)


def test_read_metrics_rejects_other_json(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps([1, 2]))
    with pytest.raises(ValueError, match="not a metrics"):
        read_metrics(p)


def test_mean_pm_std():
    assert mean_pm_std([1.0, 2.0, 3.0]) == "2.00±1.00"
    assert mean_pm_std([4.0]) == "4.00±0.00"
