"""Independent scalar-loop oracles for the distillation objectives.

Plain Python floats and nested loops only; nothing here imports ekd.
"""

import math


def _rows(x):
    return [[float(v) for v in row] for row in x]


def cos_avg(a, b, eps=1e-8):
    a, b = _rows(a), _rows(b)
    total = 0.0
    for ra, rb in zip(a, b):
        dot = sum(x * y for x, y in zip(ra, rb))
        na = math.sqrt(sum(x * x for x in ra))
        nb = math.sqrt(sum(y * y for y in rb))
        total += dot / (na * nb + eps)
    return total / len(a)


def neg_log_sigmoid(x):
    return math.log(1.0 + math.exp(-x))


def layer_loss(hs, ht, normalization="per_timestep"):
    hs, ht = _rows(hs), _rows(ht)
    t, d = len(hs), len(hs[0])
    l1 = 0.0
    for rs, rt in zip(hs, ht):
        for x, y in zip(rs, rt):
            l1 += abs(x - y)
    l1 = l1 / (t * d) if normalization == "per_timestep" else l1 / d
    return l1 + neg_log_sigmoid(cos_avg(hs, ht))


def average_targets(per_teacher):
    """per_teacher[m][i] is a t x d nested list."""
    M = len(per_teacher)
    out = []
    for i in range(len(per_teacher[0])):
        t, d = len(per_teacher[0][i]), len(per_teacher[0][i][0])
        out.append([[sum(float(per_teacher[m][i][r][c]) for m in range(M)) / M for c in range(d)] for r in range(t)])
    return out


def concat_targets(per_teacher):
    out = []
    for i in range(len(per_teacher[0])):
        rows = []
        for r in range(len(per_teacher[0][i])):
            row = []
            for m in range(len(per_teacher)):
                row.extend(float(v) for v in per_teacher[m][i][r])
            rows.append(row)
        out.append(rows)
    return out


def loss_avg(preds, per_teacher):
    targets = average_targets(per_teacher)
    return sum(layer_loss(p, q) for p, q in zip(preds, targets)) / len(targets)


def loss_concat(preds, per_teacher):
    targets = concat_targets(per_teacher)
    return sum(layer_loss(p, q) for p, q in zip(preds, targets)) / len(targets)


def loss_multi_pred(pred_sets, per_teacher):
    M = len(per_teacher)
    n_taps = len(per_teacher[0])
    total = 0.0
    for m in range(M):
        for i in range(n_taps):
            total += layer_loss(pred_sets[m][i], per_teacher[m][i])
    return total / (n_taps * M)
