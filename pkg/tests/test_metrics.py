import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clgraph.metrics import (MetricError, PerformanceMatrix, final_performance,
                             micro_f1, micro_f1_from_counts)
from oracles import accuracy, ap_af_recompute


def test_micro_f1_from_aggregated_counts():
    assert np.isclose(micro_f1_from_counts(2, 1, 1), 4.0 / 6.0, atol=1e-15)


def test_micro_f1_perfect_predictions():
    assert micro_f1([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0


def test_micro_f1_equals_accuracy_for_single_label_multiclass():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        preds = rng.integers(0, 3, size=n)
        labels = rng.integers(0, 3, size=n)
        assert np.isclose(micro_f1(preds, labels), accuracy(preds, labels),
                          atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1,
                max_size=40),
       st.integers(0, 2**32 - 1))
def test_micro_f1_permutation_invariant(pairs, seed):
    preds = np.array([p for p, _ in pairs])
    labels = np.array([l for _, l in pairs])
    perm = np.random.default_rng(seed).permutation(len(pairs))
    assert micro_f1(preds, labels) == micro_f1(preds[perm], labels[perm])


def test_micro_f1_rejects_empty_and_mismatched():
    with pytest.raises(MetricError):
        micro_f1([], [])
    with pytest.raises(MetricError):
        micro_f1([1], [1, 2])


def test_ap_af_hand_case():
    pm = PerformanceMatrix(2)
    pm.fill_entry(0, 0, 0.8)
    pm.fill_entry(0, 1, 0.6)
    pm.fill_entry(1, 1, 0.7)
    assert np.isclose(pm.compute_ap(), 0.65, atol=1e-15)
    assert np.isclose(pm.compute_af(), 0.2, atol=1e-12)


def test_constant_matrix_has_zero_forgetting():
    pm = PerformanceMatrix(4)
    for j in range(4):
        for i in range(j + 1):
            pm.fill_entry(i, j, 0.42)
    assert np.isclose(pm.compute_ap(), 0.42, atol=1e-15)
    assert pm.compute_af() == 0.0


def test_ap_af_match_independent_recomputation():
    rng = np.random.default_rng(17)
    for _ in range(20):
        k = int(rng.integers(2, 7))
        pm = PerformanceMatrix(k)
        for j in range(k):
            for i in range(j + 1):
                pm.fill_entry(i, j, float(rng.random()))
        ap, af = ap_af_recompute(pm.values)
        assert abs(pm.compute_ap() - ap) <= 1e-12
        assert abs(pm.compute_af() - af) <= 1e-12
        assert 0.0 <= pm.compute_ap() <= 1.0
        assert -1.0 <= pm.compute_af() <= 1.0


def test_final_row_equal_to_diagonal_gives_exactly_zero_af():
    rng = np.random.default_rng(3)
    k = 5
    pm = PerformanceMatrix(k)
    diag = rng.random(k)
    for j in range(k):
        for i in range(j + 1):
            score = diag[i] if (i == j or j == k - 1) else float(rng.random())
            pm.fill_entry(i, j, score)
    assert pm.compute_af() == 0.0


def test_partial_matrix_rejected():
    pm = PerformanceMatrix(2)
    pm.fill_entry(0, 0, 0.5)
    with pytest.raises(MetricError):
        pm.compute_ap()
    with pytest.raises(MetricError):
        pm.compute_af()


def test_af_undefined_for_single_task():
    pm = PerformanceMatrix(1)
    pm.fill_entry(0, 0, 0.9)
    assert pm.compute_ap() == 0.9
    with pytest.raises(MetricError):
        pm.compute_af()


def test_fill_entry_validation():
    pm = PerformanceMatrix(3)
    with pytest.raises(MetricError):
        pm.fill_entry(2, 0, 0.5)  # above the diagonal
    with pytest.raises(MetricError):
        pm.fill_entry(0, 0, 1.5)
    with pytest.raises(MetricError):
        pm.fill_entry(0, 3, 0.5)


def test_heatmap_rows_are_one_based():
    pm = PerformanceMatrix(2)
    pm.fill_entry(0, 0, 0.8)
    pm.fill_entry(0, 1, 0.6)
    pm.fill_entry(1, 1, 0.7)
    assert pm.heatmap_rows() == [(1, 1, 0.8), (1, 2, 0.6), (2, 2, 0.7)]


def test_final_performance_is_pooled_micro_f1():
    preds = [0, 0, 1, 2]
    labels = [0, 1, 1, 2]
    assert final_performance(preds, labels) == micro_f1(preds, labels)


def test_majority_class_predictor_scores_prevalence():
    # analytic: predicting only the majority class scores its prevalence
    labels = np.array([0] * 97 + [1, 2, 3])
    preds = np.zeros(100, dtype=int)
    assert np.isclose(micro_f1(preds, labels), 0.97, atol=1e-12)
