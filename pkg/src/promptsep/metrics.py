"""Binary forensic metrics: AUC, AP, EER.

All three are rank statistics over (score, label) pairs with label 1 = fake
and higher score = more fake; each is invariant under strictly monotone
transforms of the scores. Ties are handled exactly: AUC counts half-credit
for tied cross-class pairs, AP and EER sweep distinct score values so tied
samples enter as one block.
"""

from __future__ import annotations

import numpy as np


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isfinite(s).all():
        raise ValueError("scores contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    return s, y


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic.

    Equals P(score_fake > score_real) + 0.5 * P(tie), computed exactly with
    midranks.
    """
    s, y = _validate(scores, labels)
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    rank_sum = ranks[y == 1].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _tie_blocks(s: np.ndarray, y: np.ndarray):
    """Descending distinct score values with per-block positive/total counts."""
    values, inverse = np.unique(s, return_inverse=True)  # ascending
    n_blocks = values.size
    pos = np.zeros(n_blocks, dtype=np.int64)
    tot = np.zeros(n_blocks, dtype=np.int64)
    np.add.at(pos, inverse, y)
    np.add.at(tot, inverse, 1)
    return values[::-1], pos[::-1], tot[::-1]


def ap(scores, labels) -> float:
    """Average precision over the descending-score threshold sweep.

    AP = sum over distinct thresholds of (recall increment) * precision at
    that threshold, with tied scores entering as one block.
    """
    s, y = _validate(scores, labels)
    _, pos, tot = _tie_blocks(s, y)
    n_pos = int(y.sum())
    tp = np.cumsum(pos)
    predicted = np.cumsum(tot)
    precision = tp / predicted
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def eer_detail(scores, labels) -> tuple[float, bool]:
    """EER plus whether the scores had to be inverted to orient it below 0.5.

    The sweep predicts fake at score >= threshold for thresholds at each
    distinct score and one sentinel above the maximum; FAR falls and FRR
    rises along the sweep, and their crossing is located by linear
    interpolation between adjacent thresholds.
    """
    s, y = _validate(scores, labels)
    value = _eer_sweep(s, y)
    if value > 0.5:
        return _eer_sweep(-s, y), True
    return value, False


def eer(scores, labels) -> float:
    """Canonically oriented equal error rate (always in [0, 0.5])."""
    return eer_detail(scores, labels)[0]


def _eer_sweep(s: np.ndarray, y: np.ndarray) -> float:
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    values, pos, tot = _tie_blocks(s, y)
    # thresholds descending: sentinel above max, then each distinct value;
    # at the sentinel nothing is predicted fake
    tp = np.concatenate([[0], np.cumsum(pos)])
    pred = np.concatenate([[0], np.cumsum(tot)])
    fp = pred - tp
    far = fp / n_neg                # false accept: real scored fake
    frr = (n_pos - tp) / n_pos      # false reject: fake scored real
    diff = far - frr                # -1 at sentinel, rises to +1 at full accept
    for i in range(len(diff)):
        if diff[i] == 0.0:
            return float(far[i])
        if i + 1 < len(diff) and diff[i] < 0.0 < diff[i + 1]:
            span = diff[i + 1] - diff[i]
            alpha = -diff[i] / span
            return float(far[i] + alpha * (far[i + 1] - far[i]))
    # diff is monotone from -1 to +1 over the sweep, so a crossing exists
    raise AssertionError("no FAR/FRR crossing found")
