"""Ranking/overlap metrics against brute-force oracles.

The oracles here avoid the implementation's machinery on purpose: AUROC is
literal positive/negative pair counting, average precision recounts the
confusion table from scratch at every unique threshold, and best_dice
re-evaluates dice per candidate threshold with a python loop. Exhaustive
enumeration covers every multiset of (score, label) pairs up to size 8 over
a 4-value score alphabet — by permutation invariance that is every scored
set of that size.
"""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lsr.errors import MetricError, ShapeError
from lsr.metrics import auroc, average_precision, best_dice, dice


def auroc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0
               for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def ap_oracle(scores, labels):
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        predicted = [s >= t for s in scores]
        tp = sum(1 for p, y in zip(predicted, labels) if p and y)
        precision = tp / sum(predicted)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def best_dice_oracle(score_map, true_mask):
    values = np.asarray(score_map, dtype=float).ravel()
    mask = np.asarray(true_mask, dtype=bool).ravel()
    candidates = sorted(set(values)) + [values.max() + 1.0]
    best = (None, -1.0)
    for t in candidates:
        predicted = values >= t
        denom = predicted.sum() + mask.sum()
        d = 1.0 if denom == 0 else 2.0 * (predicted & mask).sum() / denom
        if d > best[1]:
            best = (t, d)
    return best


def all_scored_sets(max_size=8, alphabet=(0.0, 1.0, 2.0, 3.0)):
    pairs = [(s, y) for s in alphabet for y in (0, 1)]
    for n in range(1, max_size + 1):
        for combo in itertools.combinations_with_replacement(pairs, n):
            scores = [c[0] for c in combo]
            labels = [c[1] for c in combo]
            yield scores, labels


class TestAurocOracle:
    def test_exhaustive_enumeration(self):
        checked = 0
        for scores, labels in all_scored_sets():
            if 0 < sum(labels) < len(labels):
                assert abs(auroc(scores, labels)
                           - auroc_oracle(scores, labels)) < 1e-12
                checked += 1
        assert checked > 10000

    def test_hand_cases(self):
        assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
        assert auroc([4, 3, 2, 1], [0, 0, 1, 1]) == 0.0
        assert auroc([1, 1], [0, 1]) == 0.5

    def test_degenerate_labels_raise(self):
        with pytest.raises(MetricError):
            auroc([1, 2], [1, 1])
        with pytest.raises(MetricError):
            auroc([1, 2], [0, 0])

    def test_nonfinite_scores_raise(self):
        with pytest.raises(MetricError):
            auroc([np.nan, 1.0], [0, 1])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            auroc([1, 2, 3], [0, 1])


class TestAveragePrecisionOracle:
    def test_exhaustive_enumeration(self):
        checked = 0
        for scores, labels in all_scored_sets():
            if sum(labels) > 0:
                assert abs(average_precision(scores, labels)
                           - ap_oracle(scores, labels)) < 1e-12
                checked += 1
        assert checked > 10000

    def test_perfect_ranking(self):
        assert average_precision([0.1, 0.2, 0.9], [0, 0, 1]) == 1.0

    def test_all_negative_raises(self):
        with pytest.raises(MetricError):
            average_precision([1, 2], [0, 0])


class TestDice:
    def test_identical_masks(self):
        m = np.array([[1, 0], [1, 1]], dtype=bool)
        assert dice(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([0, 0, 1, 1], dtype=bool)
        assert dice(a, b) == 0.0

    def test_4_6_3_fixture(self):
        # |pred| = 4, |true| = 6, overlap 3 -> 2*3 / 10 = 0.6
        pred = np.zeros(12, dtype=bool)
        true = np.zeros(12, dtype=bool)
        pred[:4] = True
        true[1:7] = True
        assert (pred & true).sum() == 3
        assert dice(pred, true) == pytest.approx(0.6)

    def test_both_empty_is_one(self):
        assert dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0

    def test_one_empty_is_zero(self):
        assert dice(np.ones(4, bool), np.zeros(4, bool)) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.ones((2, 2), bool), np.ones(4, bool))


class TestBestDice:
    def test_matches_oracle_on_random_maps(self):
        rng = np.random.default_rng(7)
        for trial in range(200):
            side = int(rng.integers(2, 7))
            # Coarse value grid forces plenty of exact ties.
            score_map = rng.integers(0, 4, (side, side)) / 2.0
            mask = rng.random((side, side)) < 0.3
            expected = best_dice_oracle(score_map, mask)
            assert best_dice(score_map, mask) == pytest.approx(expected)

    def test_constant_map_nonempty_mask(self):
        # Only candidates are "everything" and "nothing"; everything wins.
        score_map = np.full((3, 3), 2.5)
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        threshold, value = best_dice(score_map, mask)
        assert threshold == 2.5
        assert value == pytest.approx(2 * 1 / (9 + 1))

    def test_empty_mask_prefers_empty_prediction(self):
        threshold, value = best_dice(np.arange(9.0).reshape(3, 3),
                                     np.zeros((3, 3), bool))
        assert value == 1.0
        assert threshold == 9.0   # max + 1

    def test_tie_breaks_to_lowest_threshold(self):
        # Mask covers both value-1 cells and nothing else; thresholds 1 and
        # above-max both... construct: values [0, 1], mask on the 1 cell.
        score_map = np.array([[0.0, 1.0]])
        mask = np.array([[False, True]])
        threshold, value = best_dice(score_map, mask)
        assert (threshold, value) == (1.0, 1.0)


@st.composite
def scored_sets(draw, max_size=12):
    n = draw(st.integers(2, max_size))
    scores = draw(st.lists(st.integers(0, 5), min_size=n, max_size=n))
    labels = draw(st.lists(st.integers(0, 1), min_size=n, max_size=n)
                  .filter(lambda ls: 0 < sum(ls) < len(ls)))
    return [float(s) for s in scores], labels


class TestMetricProperties:
    @given(scored_sets())
    @settings(max_examples=150, deadline=None)
    def test_auroc_invariant_under_monotone_transform(self, case):
        scores, labels = case
        transformed = [3.0 * s + 1.0 for s in scores]
        assert auroc(scores, labels) == pytest.approx(
            auroc(transformed, labels), abs=1e-12)

    @given(scored_sets())
    @settings(max_examples=150, deadline=None)
    def test_auroc_negation_complement(self, case):
        scores, labels = case
        assert auroc(scores, labels) + auroc(
            [-s for s in scores], labels) == pytest.approx(1.0)

    @given(scored_sets())
    @settings(max_examples=150, deadline=None)
    def test_ap_within_bounds(self, case):
        scores, labels = case
        value = average_precision(scores, labels)
        # AP is at least the positive prevalence achieved at the lowest
        # threshold's step and at most 1.
        assert 0.0 < value <= 1.0 + 1e-12

    @given(st.lists(st.booleans(), min_size=1, max_size=30),
           st.lists(st.booleans(), min_size=1, max_size=30))
    @settings(max_examples=150, deadline=None)
    def test_dice_symmetric_and_bounded(self, a, b):
        n = min(len(a), len(b))
        x = np.asarray(a[:n], bool)
        y = np.asarray(b[:n], bool)
        assert dice(x, y) == pytest.approx(dice(y, x))
        assert 0.0 <= dice(x, y) <= 1.0
