"""Brute-force AUC-ROC reference: O(n^2) pairwise comparison.

Kept deliberately naive and separate from the package so the fast
rank-based implementation can be checked against it.
"""

import numpy as np


def pairwise_auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    positive = scores[labels == 1]
    negative = scores[labels == 0]
    if positive.size == 0 or negative.size == 0:
        raise ValueError("need both classes")
    wins = 0.0
    for p in positive:
        for n in negative:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (positive.size * negative.size)
