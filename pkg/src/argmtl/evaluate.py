"""Scores and analyses: macro-F1, invalid BIO counts, run selection, significance, curves."""

from __future__ import annotations

import itertools
import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

SIZE_ORDER = ("1K", "6K", "12K", "21K")


class ShapeMismatchError(ValueError):
    pass


def _flatten(gold: Sequence[Sequence], pred: Sequence[Sequence]) -> tuple[list, list]:
    if len(gold) != len(pred):
        raise ShapeMismatchError(f"{len(gold)} gold vs {len(pred)} predicted sequences")
    g_flat, p_flat = [], []
    for i, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ShapeMismatchError(f"sequence {i}: {len(g)} gold vs {len(p)} predicted tags")
        g_flat.extend(g)
        p_flat.extend(p)
    return g_flat, p_flat


def per_label_scores(gold, pred, labels: Sequence[Hashable]) -> dict:
    """Precision, recall and F1 per label over flattened tag sequences.

    Any ratio with a zero denominator is 0.
    """
    g_flat, p_flat = _flatten(gold, pred)
    tp, n_gold, n_pred = Counter(), Counter(g_flat), Counter(p_flat)
    for g, p in zip(g_flat, p_flat):
        if g == p:
            tp[g] += 1
    out = {}
    for lab in labels:
        prec = tp[lab] / n_pred[lab] if n_pred[lab] else 0.0
        rec = tp[lab] / n_gold[lab] if n_gold[lab] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[lab] = {"precision": prec, "recall": rec, "f1": f1, "support": n_gold[lab]}
    return out


def macro_f1(gold, pred, labels: Sequence[Hashable]) -> float:
    """Unweighted mean of per-label F1 over every label in ``labels``.

    Labels missing from both gold and prediction still count, with F1 = 0.
    """
    if not labels:
        raise ValueError("empty label list")
    scores = per_label_scores(gold, pred, labels)
    return sum(s["f1"] for s in scores.values()) / len(labels)


class InvalidBIO(NamedTuple):
    o_to_i: int
    initial_i: int
    type_switch: int

    @property
    def total(self) -> int:
        return self.o_to_i + self.initial_i + self.type_switch


def count_invalid_bio(pred: Sequence[str]) -> InvalidBIO:
    """Count O -> I transitions, sequence-initial I tags, and I-t after B-s/I-s (s != t)."""
    o_to_i = initial = switch = 0
    prev = None
    for tag in pred:
        if tag.startswith("I-"):
            if prev is None:
                initial += 1
            elif prev == "O":
                o_to_i += 1
            elif prev[2:] != tag[2:]:
                switch += 1
        prev = tag
    return InvalidBIO(o_to_i, initial, switch)


def count_invalid_bio_corpus(preds: Iterable[Sequence[str]]) -> InvalidBIO:
    totals = [0, 0, 0]
    for p in preds:
        for i, c in enumerate(count_invalid_bio(p)):
            totals[i] += c
    return InvalidBIO(*totals)


# run selection --------------------------------------------------------------


def select_top_k(records: Sequence, k: int = 10) -> tuple[float, list]:
    """Mean test score of the ``k`` records with the best dev scores.

    Records need ``dev_score``, ``test_score`` and ``run_id``; failed runs
    (no scores) are skipped. Dev ties go to the earlier run id.
    """
    usable = [r for r in records if r.dev_score is not None and r.test_score is not None]
    if not usable:
        raise ValueError("no completed records to select from")
    if len(usable) < k:
        warnings.warn(f"only {len(usable)} completed records, averaging all of them",
                      stacklevel=2)
    ranked = sorted(usable, key=lambda r: (-r.dev_score, r.run_id))
    chosen = ranked[:k]
    return sum(r.test_score for r in chosen) / len(chosen), chosen


# Mann-Whitney U --------------------------------------------------------------


def midranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties sharing the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        r = (i + j) / 2.0 + 1.0
        for m in range(i, j + 1):
            ranks[order[m]] = r
        i = j + 1
    return ranks


EXACT_LIMIT = 12


def mann_whitney_u(a: Sequence[float], b: Sequence[float],
                   exact: bool | None = None) -> tuple[float, float]:
    """Return ``(U_a, two-sided p)``.

    ``U_a`` counts pairs with ``a_i > b_j`` (ties count one half). With
    ``|a| + |b| <= 12`` the p-value is exact: every split of the pooled
    midranks into groups of the observed sizes is enumerated. Otherwise a
    normal approximation with tie and continuity corrections is used.
    """
    n1, n2 = len(a), len(b)
    if n1 < 1 or n2 < 1:
        raise ValueError("both samples need at least one value")
    ranks = midranks(list(a) + list(b))
    u_a = sum(ranks[:n1]) - n1 * (n1 + 1) / 2.0
    mean = n1 * n2 / 2.0
    if exact is None:
        exact = n1 + n2 <= EXACT_LIMIT
    if exact:
        observed = abs(u_a - mean)
        hits = total = 0
        offset = n1 * (n1 + 1) / 2.0
        for combo in itertools.combinations(range(n1 + n2), n1):
            u = sum(ranks[i] for i in combo) - offset
            total += 1
            if abs(u - mean) >= observed - 1e-9:
                hits += 1
        return u_a, hits / total
    n = n1 + n2
    ties = Counter(ranks).values()
    tie_term = sum(t**3 - t for t in ties) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u_a, 1.0
    z = (abs(u_a - mean) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return u_a, min(1.0, p)


def significance_marker(p: float) -> str:
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


# learning-delta curves --------------------------------------------------------


@dataclass
class CurvePoint:
    dataset: str
    k: str
    stl_norm: float
    mtl_norm: float

    @property
    def delta(self) -> float:
        return self.mtl_norm - self.stl_norm


def build_curves(stl: Mapping[str, float], mtl: Mapping[str, float], dataset: str = "",
                 sizes: Sequence[str] = SIZE_ORDER, base: str = "1K") -> list[CurvePoint]:
    """Scores normalised by the STL score at ``base`` size, one point per size."""
    missing = [k for k in sizes if k not in stl or k not in mtl]
    if missing:
        raise KeyError(f"missing scores for sizes {missing}")
    ref = stl[base]
    if not ref > 0:
        raise ValueError(f"STL({base}) must be positive, got {ref}")
    return [CurvePoint(dataset, k, stl[k] / ref, mtl[k] / ref) for k in sizes]


# confusion ------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # rows gold, columns predicted

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def off_diagonal(self) -> list[tuple[str, str, int]]:
        """(gold, predicted, count) for every nonzero error cell, largest first."""
        cells = [
            (self.labels[i], self.labels[j], int(self.counts[i, j]))
            for i in range(len(self.labels))
            for j in range(len(self.labels))
            if i != j and self.counts[i, j]
        ]
        return sorted(cells, key=lambda c: -c[2])


def _type_of(tag: str) -> str:
    return tag if tag == "O" else tag[2:]


def confusion(gold, pred, labels: Sequence[str]) -> tuple[ConfusionMatrix, ConfusionMatrix]:
    """Token-level confusion over ``labels`` and over component types (B/I merged)."""
    g_flat, p_flat = _flatten(gold, pred)
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for g, p in zip(g_flat, p_flat):
        counts[index[g], index[p]] += 1
    types = list(dict.fromkeys(_type_of(lab) for lab in labels))
    t_index = {t: i for i, t in enumerate(types)}
    t_counts = np.zeros((len(types), len(types)), dtype=np.int64)
    for g, p in zip(g_flat, p_flat):
        t_counts[t_index[_type_of(g)], t_index[_type_of(p)]] += 1
    return ConfusionMatrix(list(labels), counts), ConfusionMatrix(types, t_counts)
