"""Ranking metrics, per-breast view aggregation, and bootstrap intervals.

ROC-AUC uses the Mann-Whitney formulation (ties count one half) via average
ranks. PR-AUC is step-wise average precision: precision at each positive's
rank weighted by the recall increment, with descending-score ties broken by
stable input order. Both are therefore invariant under strictly increasing
score transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScoredBreast",
    "MetricsReport",
    "aggregate_views",
    "roc_auc",
    "pr_auc",
    "bootstrap_ci",
]


@dataclass
class ScoredBreast:
    patient_id: str
    study_id: str
    side: str
    score_cc: float
    score_mlo: float
    label: int

    @property
    def score(self):
        return 0.5 * (self.score_cc + self.score_mlo)


@dataclass
class MetricsReport:
    experiment: str
    dataset: str
    stats_mode: str
    n_breasts: int
    roc_auc: float
    roc_ci: tuple
    pr_auc: float
    pr_ci: tuple


def aggregate_views(records, scores):
    """Average the CC and MLO scores of each breast.

    ``records`` provide (patient_id, study_id, side, view, label); every
    breast must appear with exactly both views.
    """
    by_breast = {}
    for rec, score in zip(records, scores):
        key = (rec.patient_id, rec.study_id, rec.side)
        slot = by_breast.setdefault(key, {"label": rec.label})
        if rec.view in slot:
            raise ValueError(f"duplicate {rec.view} view for breast {key}")
        if slot["label"] != rec.label:
            raise ValueError(f"paired views disagree on label for breast {key}")
        slot[rec.view] = float(score)
    breasts = []
    for key in sorted(by_breast):
        slot = by_breast[key]
        if "CC" not in slot or "MLO" not in slot:
            raise ValueError(f"breast {key} is missing a view")
        breasts.append(
            ScoredBreast(key[0], key[1], key[2], slot["CC"], slot["MLO"],
                         int(slot["label"] == "malignant" if isinstance(slot["label"], str)
                             else slot["label"]))
        )
    return breasts


def _check_binary(labels):
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return labels.astype(np.int64)


def _average_ranks(scores):
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels):
    """P(random positive outranks random negative), ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = _average_ranks(scores)
    return (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pr_auc(scores, labels):
    """Step-wise average precision over positives in score-descending order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("pr_auc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    hits = labels[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    precision = tp / ranks
    return float(precision[hits == 1].sum() / n_pos)


def bootstrap_ci(scores, labels, metric, n_resamples=1000, rng=None, level=0.95):
    """Percentile interval over resamples with replacement.

    Resamples that lose a class (making the metric undefined) are redrawn.
    """
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    rng = rng if rng is not None else np.random.default_rng()
    scores = np.asarray(scores, dtype=np.float64)
    labels = _check_binary(labels)
    n = len(scores)
    values = np.empty(n_resamples)
    for i in range(n_resamples):
        for _ in range(1000):
            idx = rng.integers(0, n, size=n)
            picked = labels[idx]
            if 0 < picked.sum() < n:
                break
        else:
            raise RuntimeError("could not draw a two-class resample")
        values[i] = metric(scores[idx], picked)
    alpha = (1.0 - level) / 2.0
    return (
        float(np.percentile(values, 100 * alpha)),
        float(np.percentile(values, 100 * (1 - alpha))),
    )
