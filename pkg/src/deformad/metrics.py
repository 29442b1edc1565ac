"""Ranking metrics for score tables."""

from __future__ import annotations

import numpy as np


def compute_auc(scored) -> float:
    """Area under the ROC curve, Mann-Whitney form with ties counted half.

    ``scored`` is an iterable of (score, anomaly_flag) pairs; flags must
    include both classes.
    """
    pairs = list(scored)
    scores = np.asarray([float(s) for s, _ in pairs])
    flags = np.asarray([bool(f) for _, f in pairs])
    n_pos = int(flags.sum())
    n_neg = int((~flags).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both anomalous and normal samples")
    ranks = _average_ranks(scores)
    rank_sum = ranks[flags].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks
