"""Independent brute-force oracles for losses and metrics.

Deliberately written as plain python/math loops over numpy inputs, sharing
no code with the package implementations: disagreement means one side is
wrong, not both. Everything here is O(N^2) or worse by design and only ever
sees small inputs.
"""

import math

import numpy as np


def _cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def oracle_pre(f, t, tau):
    f = np.asarray(f, dtype=float)
    t = np.asarray(t, dtype=float)
    n = f.shape[0]
    sim = [[_cos(f[i], t[j]) / tau for j in range(n)] for i in range(n)]
    total = 0.0
    for i in range(n):
        row_denom = sum(math.exp(sim[i][j]) for j in range(n))
        col_denom = sum(math.exp(sim[j][i]) for j in range(n))
        total += -math.log(math.exp(sim[i][i]) / row_denom)
        total += -math.log(math.exp(sim[i][i]) / col_denom)
    return total / (2 * n)


def oracle_dis(fa, fb):
    fa = np.asarray(fa, dtype=float)
    fb = np.asarray(fb, dtype=float)
    if fa.ndim == 1:
        fa, fb = fa[None], fb[None]
    return sum(abs(_cos(fa[i], fb[i])) for i in range(fa.shape[0])) / fa.shape[0]


def oracle_div(ta, tb):
    out = 0.0
    for t in (np.asarray(ta, dtype=float), np.asarray(tb, dtype=float)):
        n = t.shape[0]
        acc = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    acc += _cos(t[i], t[j])
        out += acc / (n * (n - 1))
    return out


def oracle_align(fa, fb, tap, tbp, y, w_spec, w_irr):
    fa, fb = np.asarray(fa, dtype=float), np.asarray(fb, dtype=float)
    tap, tbp = np.asarray(tap, dtype=float), np.asarray(tbp, dtype=float)
    y = list(y)
    n = len(y)
    irr = -sum(_cos(fb[i], tbp[i]) for i in range(n)) / n
    fakes = [i for i in range(n) if y[i] == 1]
    reals = [i for i in range(n) if y[i] == 0]
    spec = 0.0
    if fakes:
        spec -= sum(_cos(fa[i], tap[i]) for i in fakes) / len(fakes)
    if reals:
        spec += sum(_cos(fa[i], tap[i]) for i in reals) / len(reals)
    return w_spec * spec + w_irr * irr


def oracle_align_terms(fa, fb, tap, tbp, y):
    spec = oracle_align(fa, fb, tap, tbp, y, 1.0, 0.0)
    irr = oracle_align(fa, fb, tap, tbp, y, 0.0, 1.0)
    return spec, irr


def oracle_con(f, y, tau):
    f = np.asarray(f, dtype=float)
    y = list(y)
    n = f.shape[0]
    z = [f[i] / math.sqrt(sum(x * x for x in f[i])) for i in range(n)]
    total = 0.0
    for i in range(n):
        positives = [j for j in range(n) if j != i and y[j] == y[i]]
        for j in positives:
            num = math.exp(sum(a * b for a, b in zip(z[i], z[j])) / tau)
            den = sum(
                math.exp(sum(a * b for a, b in zip(z[i], z[k])) / tau)
                for k in range(n) if k != i
            )
            total += -math.log(num / den)
    return total / n


def oracle_cls(logits, y):
    logits = np.asarray(logits, dtype=float)
    total = 0.0
    for i, label in enumerate(y):
        row = logits[i]
        m = max(row)
        log_z = m + math.log(sum(math.exp(v - m) for v in row))
        total += log_z - row[int(label)]
    return total / len(y)


# ---------------------------------------------------------------------------
# metric oracles

def oracle_auc(scores, labels):
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    count = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                count += 1.0
            elif sp == sn:
                count += 0.5
    return count / (len(pos) * len(neg))


def oracle_ap(scores, labels):
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    n_pos = sum(labels)
    thresholds = sorted(set(scores), reverse=True)
    prev_recall = 0.0
    ap = 0.0
    for t in thresholds:
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
        precision = tp / (tp + fp)
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def _oracle_eer_sweep(scores, labels):
    n_pos = sum(1 for l in labels if l == 1)
    n_neg = len(labels) - n_pos
    # descending thresholds starting above every score (nothing accepted)
    thresholds = [max(scores) + 1.0] + sorted(set(scores), reverse=True)
    points = []
    for t in thresholds:
        fa = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0) / n_neg
        fr = sum(1 for s, l in zip(scores, labels) if s < t and l == 1) / n_pos
        points.append((fa, fr))
    for idx, (fa, fr) in enumerate(points):
        if fa == fr:
            return fa
        if idx + 1 < len(points):
            fa2, fr2 = points[idx + 1]
            if fa < fr and fa2 > fr2:
                # linear interpolation between the two sweep points
                d1 = fr - fa
                d2 = fa2 - fr2
                alpha = d1 / (d1 + d2)
                return fa + alpha * (fa2 - fa)
    raise AssertionError("no crossing")


def oracle_eer(scores, labels):
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    value = _oracle_eer_sweep(scores, labels)
    if value > 0.5:
        return _oracle_eer_sweep([-s for s in scores], labels), True
    return value, False
