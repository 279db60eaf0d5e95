"""Confusion counts, micro/macro F1, and threshold tuning vs brute force."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from notecoder.errors import ConfigError, ShapeError, UndefinedMetricError
from notecoder.metrics import (
    DEFAULT_GRID,
    confusion,
    macro_f1,
    metrics_report,
    micro_f1,
    tune_thresholds,
)


def confusion_oracle(decisions, labels):
    """Brute-force double loop over examples and labels."""
    n, k = decisions.shape
    out = np.zeros((k, 4), dtype=np.int64)
    for j in range(k):
        for i in range(n):
            d, y = bool(decisions[i, j]), bool(labels[i, j])
            if d and y:
                out[j, 0] += 1
            elif d and not y:
                out[j, 1] += 1
            elif not d and y:
                out[j, 2] += 1
            else:
                out[j, 3] += 1
    return out


def f1_oracle(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


class TestConfusion:
    def test_perfect_predictions(self):
        labels = np.array([[1, 0], [0, 1], [1, 1]])
        counts = confusion(labels, labels)
        assert np.all(counts[:, 1] == 0) and np.all(counts[:, 2] == 0)
        assert counts[0, 0] == 2 and counts[1, 0] == 2

    def test_inverted_predictions(self):
        labels = np.array([[1, 0], [0, 1]])
        counts = confusion(1 - labels, labels)
        assert np.all(counts[:, 0] == 0) and np.all(counts[:, 3] == 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = rng.random((20, 5)) < 0.4
            y = rng.random((20, 5)) < 0.3
            assert np.array_equal(confusion(d, y), confusion_oracle(d, y))

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(1)
        d = rng.random((17, 3)) < 0.5
        y = rng.random((17, 3)) < 0.5
        assert np.all(confusion(d, y).sum(axis=1) == 17)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            confusion(np.zeros((3, 2)), np.zeros((2, 3)))


class TestF1:
    def test_pooled_two_thirds_exactly(self):
        # tp=2, fp=1, fn=1 pooled: precision = recall = 2/3, so F1 = 2/3
        counts = np.array([[1, 1, 0, 5], [1, 0, 1, 5]])
        assert micro_f1(counts) == pytest.approx(2.0 / 3.0, abs=0)

    def test_perfect_is_one(self):
        counts = np.array([[4, 0, 0, 6], [3, 0, 0, 7]])
        assert micro_f1(counts) == 1.0
        assert macro_f1(counts) == 1.0

    def test_zero_tp_is_zero(self):
        counts = np.array([[0, 3, 2, 5]])
        assert micro_f1(counts) == 0.0

    def test_micro_empty_policies(self):
        counts = np.array([[0, 0, 0, 9]])
        assert micro_f1(counts) == 0.0
        with pytest.raises(UndefinedMetricError):
            micro_f1(counts, empty="strict")

    def test_macro_empty_policies(self):
        counts = np.array([[2, 0, 0, 5], [0, 0, 0, 7]])
        assert macro_f1(counts, empty="skip") == 1.0
        assert macro_f1(counts, empty="one") == 1.0
        with pytest.raises(UndefinedMetricError):
            macro_f1(counts, empty="strict")
        with pytest.raises(UndefinedMetricError):
            macro_f1(np.array([[0, 0, 0, 5]]), empty="skip")
        with pytest.raises(ConfigError):
            macro_f1(counts, empty="whatever")

    def test_matches_brute_force_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            d = rng.random((20, 5)) < rng.uniform(0.2, 0.8)
            y = rng.random((20, 5)) < rng.uniform(0.2, 0.8)
            counts = confusion(d, y)
            tp, fp, fn = counts[:, 0].sum(), counts[:, 1].sum(), counts[:, 2].sum()
            assert abs(micro_f1(counts) - f1_oracle(tp, fp, fn)) < 1e-12
            per_label = [
                f1_oracle(*row[:3])
                for row in counts
                if row[:3].sum() > 0
            ]
            if per_label:
                assert abs(macro_f1(counts) - np.mean(per_label)) < 1e-12

    @given(
        st.integers(min_value=0, max_value=50),
        st.integers(min_value=0, max_value=50),
        st.integers(min_value=0, max_value=50),
    )
    @settings(max_examples=200, deadline=None)
    def test_micro_in_unit_interval(self, tp, fp, fn):
        counts = np.array([[tp, fp, fn, 0]])
        assert 0.0 <= micro_f1(counts) <= 1.0

    def test_column_permutation_invariance(self):
        rng = np.random.default_rng(3)
        d = rng.random((15, 6)) < 0.5
        y = rng.random((15, 6)) < 0.5
        perm = rng.permutation(6)
        assert micro_f1(confusion(d, y)) == micro_f1(confusion(d[:, perm], y[:, perm]))


def tune_oracle(scores, labels, grid):
    """Brute-force re-scan: every threshold for every label."""
    n, k = scores.shape
    out = np.zeros(k)
    for j in range(k):
        best_t, best_f1 = None, -1.0
        for t in sorted(grid):
            d = scores[:, j] >= t
            tp = int((d & labels[:, j]).sum())
            fp = int((d & ~labels[:, j]).sum())
            fn = int((~d & labels[:, j]).sum())
            f1 = f1_oracle(tp, fp, fn)
            if f1 > best_f1 + 1e-15:
                best_t, best_f1 = t, f1
        out[j] = best_t
    return out


class TestTuneThresholds:
    def test_separable_label_reaches_perfect_f1(self):
        scores = np.array([[0.9], [0.8], [0.2], [0.1]])
        labels = np.array([[1], [1], [0], [0]])
        t = tune_thresholds(scores, labels, grid=(0.3, 0.5, 0.7))
        d = scores >= t
        counts = confusion(d, labels)
        assert micro_f1(counts) == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            scores = rng.random((30, 4))
            labels = rng.random((30, 4)) < 0.4
            expected = tune_oracle(scores, labels, DEFAULT_GRID)
            got = tune_thresholds(scores, labels)
            assert np.allclose(got, expected)

    def test_constant_scores_pick_smallest(self):
        scores = np.full((10, 2), 0.6)
        labels = np.zeros((10, 2), dtype=bool)
        labels[0, 0] = True
        t = tune_thresholds(scores, labels, grid=(0.2, 0.4, 0.8))
        assert np.all(t == 0.2)

    def test_grid_validation(self):
        with pytest.raises(ConfigError):
            tune_thresholds(np.zeros((2, 1)), np.zeros((2, 1)), grid=())
        with pytest.raises(ConfigError):
            tune_thresholds(np.zeros((2, 1)), np.zeros((2, 1)), grid=(0.0, 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tune_thresholds(np.zeros((3, 2)), np.zeros((3, 3)))


class TestReport:
    def test_report_structure(self):
        counts = np.array([[2, 1, 1, 6], [3, 0, 2, 5]])
        report = metrics_report(counts, thresholds=np.array([0.4, 0.6]), label_names=["a", "b"])
        assert [row["label"] for row in report["labels"]] == ["a", "b"]
        assert report["micro"]["f1"] == pytest.approx(
            f1_oracle(5, 1, 3), abs=1e-12
        )
        assert report["thresholds"] == [0.4, 0.6]
        assert report["labels"][0]["tp"] == 2
