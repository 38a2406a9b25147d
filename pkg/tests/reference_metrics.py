"""Definitional reference metrics, written independently of the package.

Each function takes the estimated list, the ordered relevant list and k, and
evaluates the textbook formula with plain Python loops.
"""

import math


def ap_ref(estimated, relevant, k):
    rel = set(relevant)
    hits = 0
    precisions = []
    for p in range(1, min(k, len(estimated)) + 1):
        if estimated[p - 1] in rel:
            hits += 1
            precisions.append(hits / p)
    return sum(precisions) / len(relevant)


def recall_ref(estimated, relevant, k):
    top = estimated[:k]
    return sum(1 for r in relevant if r in top) / len(relevant)


def rr_ref(estimated, relevant, k):
    for p, item in enumerate(estimated, start=1):
        if item in relevant:
            return 1.0 / p if p <= k else 0.0
    return 0.0


def ndcg_ref(estimated, relevant, k, gains):
    gain_of = dict(zip(relevant, gains))
    dcg = 0.0
    for p in range(1, min(k, len(estimated)) + 1):
        dcg += gain_of.get(estimated[p - 1], 0.0) / math.log2(p + 1)
    ideal = 0.0
    for p, g in enumerate(sorted(gains, reverse=True), start=1):
        if p > k:
            break
        ideal += g / math.log2(p + 1)
    return dcg / ideal


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))
