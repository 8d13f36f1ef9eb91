import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tracecoder.errors import ValidationError
from tracecoder.metrics import (
    DEFAULT_GRID, EvalBatch, all_metrics, macro_auc, macro_auc_details, macro_f1, micro_auc,
    micro_f1, optimize_threshold, optimize_threshold_per_label, precision_at_n,
)


def B(scores, gold, thr=0.5):
    return EvalBatch(np.array(scores, dtype=float), np.array(gold), thr)


# -- hand-derived cases ---------------------------------------------------------------

def test_micro_f1_perfect():
    assert micro_f1(B([[1, 0], [0, 1]], [[1, 0], [0, 1]])) == 1.0


def test_micro_f1_hand_counted():
    # labels A B C D; doc1 gold {A,B} pred {A}; doc2 gold {C} pred {C,D}
    scores = [[1, 0, 0, 0], [0, 0, 1, 1]]
    gold = [[1, 1, 0, 0], [0, 0, 1, 0]]
    assert micro_f1(B(scores, gold)) == pytest.approx(2 / 3, abs=1e-12)


def test_micro_f1_zero_over_zero():
    assert micro_f1(B([[0.1, 0.2]], [[0, 0]])) == 0.0


def test_macro_f1_cases():
    # supported labels perfect, unsupported labels scored 0 by convention
    assert macro_f1(B([[0.9, 0.1, 0.1]], [[1, 0, 0]])) == pytest.approx(1 / 3)
    assert macro_f1(B([[0.9, 0.9], [0.1, 0.1]], [[1, 0], [0, 1]])) == pytest.approx(0.5)
    one = B([[0.9], [0.2], [0.7]], [[1], [1], [0]])
    assert macro_f1(one) == micro_f1(one)


def test_micro_auc_cases():
    assert micro_auc(B([[0.9, 0.4, 0.6, 0.1]], [[1, 0, 1, 0]])) == 1.0
    assert micro_auc(B([[0.3, 0.3, 0.3]], [[1, 0, 1]])) == 0.5
    assert micro_auc(B([[0.3, 0.4]], [[1, 1]])) is None


def test_macro_auc_cases():
    # label 0 ranked perfectly; label 1: positives {0.6, 0.2} vs negative {0.4} → 1/2
    scores = [[0.9, 0.6], [0.8, 0.4], [0.1, 0.2]]
    gold = [[1, 1], [1, 0], [0, 1]]
    assert macro_auc(B(scores, gold)) == pytest.approx((1.0 + 0.5) / 2)
    # label 1 all negative → excluded and counted
    val, excluded = macro_auc_details(B([[0.9, 0.1], [0.2, 0.3]], [[1, 0], [0, 0]]))
    assert val == 1.0 and excluded == 1
    assert macro_auc(B([[0.5]], [[1]])) is None


def test_precision_at_n_cases():
    assert precision_at_n(B([[0.9, 0.8, 0.1]], [[1, 1, 0]]), 2) == 1.0
    assert precision_at_n(B([[0.9, 0.5, 0.4, 0.3, 0.2, 0.1]], [[1, 0, 0, 0, 0, 0]]), 5) == 0.2
    # ties broken by lower label index
    assert precision_at_n(B([[0.5, 0.5, 0.5]], [[1, 0, 0]]), 1) == 1.0
    assert precision_at_n(B([[0.5, 0.5, 0.5]], [[0, 0, 1]]), 1) == 0.0
    with pytest.raises(ValidationError):
        precision_at_n(B([[0.5, 0.5]], [[0, 1]]), 3)


def test_precision_at_n_three_docs_vs_reference():
    s = [[0.1, 0.7, 0.7, 0.2], [0.9, 0.0, 0.3, 0.3], [0.4, 0.4, 0.4, 0.8]]
    g = [[0, 0, 1, 1], [1, 0, 0, 1], [0, 1, 0, 1]]
    for n in (1, 2, 3):
        assert precision_at_n(B(s, g), n) == pytest.approx(oracles.precision_at_n(s, g, n), abs=1e-12)


def test_eval_batch_validation():
    with pytest.raises(ValidationError):
        B([[0.1, 0.2]], [[1]])
    with pytest.raises(ValidationError):
        B([[0.1]], [[2]])


def test_all_metrics_keys():
    r = all_metrics(B(np.random.default_rng(0).random((4, 16)),
                      np.eye(4, 16, dtype=int)), ns=(5, 8, 15))
    assert set(r) == {"micro_f1", "macro_f1", "micro_auc", "macro_auc", "excluded_label_count",
                      "p_at_5", "p_at_8", "p_at_15"}


# -- invariances ---------------------------------------------------------------------

shape = st.tuples(st.integers(1, 8), st.integers(1, 10))


@st.composite
def instances(draw):
    n, L = draw(shape)
    rng = np.random.default_rng(draw(st.integers(0, 2**31)))
    # coarse scores so ties actually occur
    return np.round(rng.random((n, L)), 1), (rng.random((n, L)) < 0.35).astype(int), rng


@settings(max_examples=100, deadline=None)
@given(instances())
def test_micro_f1_permutation_invariant(inst):
    s, g, rng = inst
    r, c = rng.permutation(s.shape[0]), rng.permutation(s.shape[1])
    assert micro_f1(EvalBatch(s, g)) == micro_f1(EvalBatch(s[r][:, c], g[r][:, c]))


@settings(max_examples=100, deadline=None)
@given(instances())
def test_auc_monotone_invariant(inst):
    s, g, _ = inst
    t = np.exp(3 * s) - 7  # strictly increasing
    for fn in (micro_auc, macro_auc):
        a, b = fn(EvalBatch(s, g)), fn(EvalBatch(np.clip(t, -1e9, 1e9), g))
        assert (a is None and b is None) or a == pytest.approx(b, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31))
def test_precision_upper_bound(g_count, seed):
    rng = np.random.default_rng(seed)
    L = 10
    gold = np.zeros((5, L), dtype=int)
    for row in gold:
        row[rng.choice(L, g_count, replace=False)] = 1
    s = rng.random((5, L))
    for n in range(g_count, L + 1):
        assert precision_at_n(EvalBatch(s, gold), n) <= g_count / n + 1e-12


# -- threshold -----------------------------------------------------------------------

def test_threshold_separating():
    s = np.array([[0.9, 0.1], [0.1, 0.9]])
    g = np.array([[1, 0], [0, 1]])
    assert optimize_threshold(s, g) == 0.11


def test_threshold_all_positive_smallest():
    assert optimize_threshold(np.random.default_rng(1).random((3, 4)), np.ones((3, 4))) == 0.05


def test_threshold_one_point_grid():
    assert optimize_threshold(np.array([[0.3]]), np.array([[1]]), [0.5]) == 0.5


def test_threshold_bad_grid():
    with pytest.raises(ValidationError):
        optimize_threshold(np.array([[0.3]]), np.array([[1]]), [])
    with pytest.raises(ValidationError):
        optimize_threshold(np.array([[0.3]]), np.array([[1]]), [1.0])


def test_per_label_thresholds():
    s = np.array([[0.9, 0.3], [0.2, 0.25]])
    g = np.array([[1, 1], [0, 0]])
    assert list(optimize_threshold_per_label(s, g)) == [0.21, 0.26]
    assert len(DEFAULT_GRID) == 91 and DEFAULT_GRID[0] == 0.05 and DEFAULT_GRID[-1] == 0.95
