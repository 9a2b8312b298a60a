"""Binary classification metrics. Class 1 (spliced) is the positive class.

Ratios with a zero denominator evaluate to 0.0; :class:`MetricsReport`
lists those metrics in ``degenerate``.
"""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


def _ratio(num, den):
    return num / den if den else 0.0


def accuracy(tp, tn, fp, fn):
    return _ratio(tp + tn, tp + tn + fp + fn)


def precision(tp, tn, fp, fn):
    return _ratio(tp, tp + fp)


def recall(tp, tn, fp, fn):
    return _ratio(tp, tp + fn)


def f1_from_pr(p, r):
    return _ratio(2 * p * r, p + r)


def f1(tp, tn, fp, fn):
    return f1_from_pr(precision(tp, tn, fp, fn), recall(tp, tn, fp, fn))


def mcc(tp, tn, fp, fn):
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return _ratio(tp * tn - fp * fn, math.sqrt(den))


def confusion(labels, predicted):
    labels = np.asarray(labels).astype(bool)
    predicted = np.asarray(predicted).astype(bool)
    tp = int(np.sum(labels & predicted))
    tn = int(np.sum(~labels & ~predicted))
    fp = int(np.sum(~labels & predicted))
    fn = int(np.sum(labels & ~predicted))
    return tp, tn, fp, fn


def auc(scores, labels):
    """Rank-sum (Mann-Whitney) AUC with mid-ranks for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.0
    ranks = rankdata(scores, method="average")
    r_pos = ranks[labels].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(scores, labels):
    """(threshold, fpr, tpr) triples, sweeping every distinct score from high
    to low; a sample is called positive when score >= threshold. The first
    point uses threshold +inf (nothing positive)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = max(int(labels.sum()), 1)
    n_neg = max(int((~labels).sum()), 1)
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    tps = np.cumsum(l)
    fps = np.cumsum(~l)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    points = [(math.inf, 0.0, 0.0)]
    for i in last:
        points.append((float(s[i]), fps[i] / n_neg, tps[i] / n_pos))
    return points


@dataclass
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    acc: float
    precision: float
    recall: float
    f1: float
    mcc: float
    auc: float
    roc: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)

    def to_json(self, **kw):
        d = asdict(self)
        d["roc"] = [[fpr, tpr] for _, fpr, tpr in self.roc]
        return json.dumps(d, **kw)


def report(scores, labels, threshold=0.5):
    """Full report from spliced-probabilities; predicted spliced when score > threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    tp, tn, fp, fn = confusion(labels, scores > threshold)
    degenerate = []
    if tp + fp == 0:
        degenerate.append("precision")
    if tp + fn == 0:
        degenerate.append("recall")
    p, r = precision(tp, tn, fp, fn), recall(tp, tn, fp, fn)
    if p + r == 0:
        degenerate.append("f1")
    if 0 in (tp + fp, tp + fn, tn + fp, tn + fn):
        degenerate.append("mcc")
    if np.unique(labels).size < 2:
        degenerate.append("auc")
    return MetricsReport(tp, tn, fp, fn, accuracy(tp, tn, fp, fn), p, r,
                         f1_from_pr(p, r), mcc(tp, tn, fp, fn), auc(scores, labels),
                         roc_points(scores, labels), degenerate)
