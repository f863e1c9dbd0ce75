"""Slow, independent reference computations used as test oracles.

Nothing here touches the graph code: plain floats, loops and enumeration.
"""

import itertools
import math


def path_score(emissions, trans, start, end, path):
    s = start[path[0]] + end[path[-1]]
    for t, y in enumerate(path):
        s += emissions[t][y]
    for a, b in zip(path, path[1:]):
        s += trans[a][b]
    return s


def all_paths(length, k):
    return itertools.product(range(k), repeat=length)


def brute_log_z(emissions, trans, start, end):
    scores = [path_score(emissions, trans, start, end, p)
              for p in all_paths(len(emissions), len(trans))]
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


def brute_best(emissions, trans, start, end):
    """(best score, lowest-index-lexicographic argmax path)."""
    best, arg = -math.inf, None
    for p in all_paths(len(emissions), len(trans)):
        s = path_score(emissions, trans, start, end, p)
        if s > best:
            best, arg = s, p
    return best, list(arg)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_lstm(xs, W, U, b, reverse=False):
    """Step-by-step LSTM with gate blocks [input, forget, output, candidate].

    ``xs`` is a list of input vectors, ``W`` is d x 4H, ``U`` is H x 4H and
    ``b`` a list of 4H. Returns hidden vectors in time order.
    """
    hidden = len(U)
    h = [0.0] * hidden
    c = [0.0] * hidden
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    out = [None] * len(xs)
    for t in order:
        z = []
        for j in range(4 * hidden):
            acc = b[j]
            for i, xi in enumerate(xs[t]):
                acc += xi * W[i][j]
            for i, hi in enumerate(h):
                acc += hi * U[i][j]
            z.append(acc)
        new_c, new_h = [], []
        for u in range(hidden):
            ig = _sig(z[u])
            fg = _sig(z[hidden + u])
            og = _sig(z[2 * hidden + u])
            cand = math.tanh(z[3 * hidden + u])
            cu = fg * c[u] + ig * cand
            new_c.append(cu)
            new_h.append(og * math.tanh(cu))
        c, h = new_c, new_h
        out[t] = list(h)
    return out


def precision_recall_f1(gold_flat, pred_flat, label):
    tp = sum(1 for g, p in zip(gold_flat, pred_flat) if g == label and p == label)
    fp = sum(1 for g, p in zip(gold_flat, pred_flat) if g != label and p == label)
    fn = sum(1 for g, p in zip(gold_flat, pred_flat) if g == label and p != label)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def macro_f1_oracle(gold, pred, labels):
    gf = [t for s in gold for t in s]
    pf = [t for s in pred for t in s]
    return sum(precision_recall_f1(gf, pf, lab) for lab in labels) / len(labels)


def mwu_exact_oracle(a, b):
    """U_a by pair counting and two-sided exact p by enumerating group labelings."""
    def u_of(x, y):
        return sum(1.0 if xi > yi else 0.5 if xi == yi else 0.0 for xi in x for yi in y)

    pooled = list(a) + list(b)
    n1 = len(a)
    u_obs = u_of(a, b)
    mean = len(a) * len(b) / 2
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), n1):
        x = [pooled[i] for i in idx]
        y = [pooled[i] for i in range(len(pooled)) if i not in idx]
        total += 1
        if abs(u_of(x, y) - mean) >= abs(u_obs - mean) - 1e-12:
            hits += 1
    return u_obs, hits / total
