"""Ranking and overlap metrics for scored samples and anomaly maps.

All functions are pure numpy. Tie handling is pinned exactly:

* ``auroc`` equals P(score+ > score-) + 0.5 * P(score+ = score-) over all
  positive/negative pairs (midrank formulation).
* ``average_precision`` is the step-wise sum over descending unique score
  thresholds, ties grouped at one threshold.
* ``best_dice`` sweeps predicted masks ``map >= t`` over the map's unique
  values (plus the empty prediction) and breaks ties toward the lowest
  threshold.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError, ShapeError


def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} vs labels {y.shape}")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """Area under the ROC curve; ties credit half a pair."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve."""
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # Last index of each tie group = one prediction set per unique threshold.
    boundary = np.nonzero(np.diff(s))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(y)[ends]
    n_pred = ends + 1
    precision = tp / n_pred
    recall = tp / n_pos
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - recall_prev) * precision))


def dice(pred_mask, true_mask) -> float:
    """Dice overlap 2|A∩B| / (|A| + |B|); two empty masks count as 1.0."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def best_dice(score_map, true_mask) -> tuple[float, float]:
    """Best (threshold, dice) over predicted masks ``score_map >= t``.

    Candidate thresholds are the map's unique values plus one above the
    maximum (the empty prediction). Ties resolve to the lowest threshold.
    """
    s = np.asarray(score_map, dtype=np.float64).ravel()
    m = np.asarray(true_mask).astype(bool).ravel()
    if s.size != m.size:
        raise ShapeError(f"map size {s.size} vs mask size {m.size}")
    if s.size == 0:
        raise MetricError("score map is empty")
    if not np.isfinite(s).all():
        raise MetricError("score map must be finite")
    n_pos = int(m.sum())
    order = np.argsort(-s, kind="stable")
    s_sorted, m_sorted = s[order], m[order]
    boundary = np.nonzero(np.diff(s_sorted))[0]
    ends = np.concatenate([boundary, [s.size - 1]])
    tp = np.cumsum(m_sorted)[ends]
    n_pred = ends + 1
    thresholds = s_sorted[ends]              # descending
    dice_vals = 2.0 * tp / (n_pred + n_pos)
    # Empty prediction: threshold just above the maximum value.
    thresholds = np.concatenate([thresholds, [s_sorted[0] + 1.0]])
    dice_vals = np.concatenate([dice_vals, [1.0 if n_pos == 0 else 0.0]])
    best_t, best_d = None, -1.0
    for t, d in zip(thresholds, dice_vals):   # ascending-threshold tie-break
        if d > best_d or (d == best_d and t < best_t):
            best_t, best_d = float(t), float(d)
    return best_t, best_d
