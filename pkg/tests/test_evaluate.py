import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import small_config
from slmpda.evaluate import (CANONICAL_ROWS, distance_report, evaluate_accuracy, export_features, row_config,
                             run_ablation, selector_metrics, sliced_wasserstein, wasserstein_1d)
from slmpda.trainer import Trainer


def test_accuracy_examples():
    labels = np.array([0, 1, 2, 3] * 5)
    assert evaluate_accuracy(np.zeros(20, dtype=int), labels) == 0.25
    assert evaluate_accuracy(np.eye(4)[labels], labels) == 1.0
    perm = np.random.default_rng(0).permutation(20)
    pred = np.array([0, 1, 1, 3] * 5)
    assert evaluate_accuracy(pred[perm], labels[perm]) == evaluate_accuracy(pred, labels)
    assert evaluate_accuracy([0, 5], [0, -1]) == 1.0
    with pytest.raises(ValueError):
        evaluate_accuracy([], [])


def test_selector_metric_examples():
    oracle = np.array([1, 1, 0, 0, 0], dtype=bool)
    m = selector_metrics(np.ones(5), oracle)
    assert m.recall == 1.0 and m.precision == pytest.approx(0.4)
    m = selector_metrics(oracle, oracle)
    assert m.precision == m.recall == 1.0
    m = selector_metrics(np.zeros(5), oracle)
    assert m.tp == 0 and m.recall == 0.0 and m.precision is None


def _brute_w1(x, y):
    """W1 as the integral of |F_x - F_y| over the real line."""
    pts = np.sort(np.concatenate([x, y]))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        fx = np.mean(x <= a)
        fy = np.mean(y <= a)
        total += abs(fx - fy) * (b - a)
    return total


def test_wasserstein_1d_matches_cdf_integral():
    rng = np.random.default_rng(1)
    for _ in range(50):
        x = rng.standard_normal(rng.integers(1, 9))
        y = rng.standard_normal(rng.integers(1, 9)) + 0.5
        assert abs(wasserstein_1d(x, y) - _brute_w1(x, y)) < 1e-10


def test_sliced_examples():
    X = np.random.default_rng(0).standard_normal((20, 3))
    assert sliced_wasserstein(X, X) == 0.0
    assert sliced_wasserstein([[0.0]], [[3.0]], directions=np.array([[1.0]])) == 3.0
    assert sliced_wasserstein([[0.0]], [[3.0]], directions=np.array([[-1.0]])) == 3.0


def test_sliced_width_one_is_exact():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((13, 1)), rng.standard_normal((7, 1))
    assert abs(sliced_wasserstein(x, y, n_projections=5) - wasserstein_1d(x, y)) < 1e-10


def test_sliced_translation_closed_form():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((200, 2))
    t = np.array([1.5, -0.8])
    est = sliced_wasserstein(X, X + t, n_projections=4000, rng=np.random.default_rng(4))
    assert est == pytest.approx(2 * np.linalg.norm(t) / math.pi, rel=0.02)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-5, 5)), arrays(np.float64, (4, 2), elements=st.floats(-5, 5)))
def test_sliced_symmetric_nonnegative(X, Y):
    dirs = np.random.default_rng(0).standard_normal((16, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    a = sliced_wasserstein(X, Y, directions=dirs)
    assert a >= 0 and a == pytest.approx(sliced_wasserstein(Y, X, directions=dirs), abs=1e-12)


def test_sliced_rejects_empty():
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))


def test_distance_report_cases():
    rng = np.random.default_rng(5)
    S = rng.standard_normal((30, 2))
    T = rng.standard_normal((25, 2)) + 1
    rep = distance_report(S, S[:0], S, T)
    assert rep.normalized_sel == pytest.approx(1.0) and rep.d_dis_T is None
    rep = distance_report(S[:10], S[10:], S, S[:10])
    assert rep.d_sel_T == pytest.approx(0.0, abs=1e-12)


def test_row_configs(small_task):
    base = small_config()
    assert len(CANONICAL_ROWS) == 4
    v = row_config(base, "vanilla")
    assert (v.use_select, v.use_label, v.use_mix) == (False, False, False)
    assert row_config(base, "hard-pl").label.hard
    assert not row_config(base, "no-hausdorff").select.use_hausdorff
    with pytest.raises(ValueError):
        row_config(base, "nope")


def test_identical_rows_give_identical_results(small_task):
    rows = run_ablation(small_config(steps=6), small_task, [0, 1], rows=("slm", "slm"))
    assert rows[0].accuracies == rows[1].accuracies
    with pytest.raises(ValueError):
        run_ablation(small_config(), small_task, [0])


def test_export_features(tmp_path, small_task):
    t = Trainer(small_config(steps=3), small_task.train)
    t.run()
    n = export_features(t.eval_view(), small_task, tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert n == len(small_task.train.source_x) + len(small_task.train.target_x) == len(lines) - 1
    assert lines[0].split(",")[:3] == ["domain", "label", "selected"]
    assert len(lines[1].split(",")) == 3 + t.cfg.model.feature_dim
