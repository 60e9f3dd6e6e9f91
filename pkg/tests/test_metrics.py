import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmae.errors import MetricError
from fmae.metrics import MetricReport, auroc, mape, naive_rul_baseline, read_metric_csv, rmse_mae_mape, spearman


def _pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auroc_matches_pairwise_enumeration_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        size = int(rng.integers(2, 25))
        labels = rng.random(size) < 0.5
        labels[0], labels[1] = True, False
        # a coarse score grid forces plenty of ties
        scores = rng.integers(0, 6, size).astype(float)
        assert auroc(scores, labels) == _pairwise_auroc(scores, labels)


def test_auroc_extremes():
    assert auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0
    assert auroc([1.0, 1.0], [0, 1]) == 0.5
    with pytest.raises(MetricError):
        auroc([1.0, 2.0], [1, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(0.5, 1e3)), min_size=1, max_size=40))
def test_regression_metrics_match_recomputation(pairs):
    pred = [p for p, _ in pairs]
    truth = [t for _, t in pairs]
    rmse, mae, mp = rmse_mae_mape(pred, truth)
    n = len(pairs)
    assert rmse == pytest.approx(math.sqrt(math.fsum((p - t) ** 2 for p, t in pairs) / n), rel=1e-12, abs=1e-12)
    assert mae == pytest.approx(math.fsum(abs(p - t) for p, t in pairs) / n, rel=1e-12, abs=1e-12)
    assert mp == pytest.approx(100.0 * math.fsum(abs(p - t) / abs(t) for p, t in pairs) / n, rel=1e-12)


def test_mape_undefined_at_zero_truth():
    assert rmse_mae_mape([1.0, 2.0], [0.0, 2.0])[2] is None
    with pytest.raises(MetricError):
        mape([1.0], [0.0])
    with pytest.raises(MetricError):
        rmse_mae_mape([], [])


def test_naive_baseline_predicts_training_mean():
    assert naive_rul_baseline([100, 200], [150, 150]) == 0.0
    assert naive_rul_baseline([10, 30], [0, 40]) == pytest.approx(20.0)
    with pytest.raises(MetricError):
        naive_rul_baseline([], [1.0])


def test_spearman_is_rank_correlation():
    assert spearman([1, 2, 3, 4], [10, 20, 35, 1000]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_report_round_trip_and_summary(tmp_path):
    rep = MetricReport("capacity", "synthetic", config={"lr": 0.00625}, seed=3)
    for v in (0.1, 0.2, 0.30000000000000004):
        rep.add("rmse", v)
    rep.add("spearman", 0.5)
    csv_path, txt_path = rep.write(tmp_path)
    back = read_metric_csv(csv_path)
    assert back["rmse"] == [0.1, 0.2, 0.30000000000000004]
    assert back["spearman"] == [0.5]
    assert rep.std("rmse") == pytest.approx(np.std([0.1, 0.2, 0.3]))
    text = txt_path.read_text()
    assert "lr = 0.00625" in text and "seed = 3" in text and "folds = 3" in text
