"""Retrieval metrics at a cutoff, tag AUC and confidence intervals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .oracle import OracleConfig, RankedList, similarity_matrix

log = logging.getLogger(__name__)

METRICS = ("MAP", "Recall", "RR", "nDCG")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 20
    n_relevant: int = 5
    gains: tuple[float, ...] | None = None  # defaults to n_relevant, ..., 1

    def __post_init__(self):
        if self.k < 1 or self.n_relevant < 1:
            raise ValueError("k and n_relevant must be positive")
        if self.n_relevant > self.k:
            raise ValueError("n_relevant must not exceed k")
        gains = self.gains
        if gains is None:
            gains = tuple(float(g) for g in range(self.n_relevant, 0, -1))
        gains = tuple(float(g) for g in gains)
        if len(gains) != self.n_relevant:
            raise ValueError("need exactly one gain per relevant item")
        if any(g <= 0 for g in gains) or any(a <= b for a, b in zip(gains, gains[1:])):
            raise ValueError("gains must be positive and strictly descending")
        object.__setattr__(self, "gains", gains)

    def to_dict(self):
        return {"k": self.k, "n_relevant": self.n_relevant, "gains": list(self.gains)}


@dataclass(frozen=True)
class RetrievalResult:
    query: int
    estimated: tuple[int, ...]
    relevant: tuple[int, ...]  # ground-truth order: relevant[0] is r_1

    def __post_init__(self):
        if self.query in self.estimated or self.query in self.relevant:
            raise ValueError("the query must not appear in its own result lists")
        if len(set(self.estimated)) != len(self.estimated):
            raise ValueError("estimated list contains duplicates")


@dataclass
class MetricsReport:
    system: str
    summary: dict[str, tuple[float, float]]  # metric -> (mean x100, CI half-width x100)
    per_query: dict[str, list[float]] = field(repr=False, default_factory=dict)
    queries: list[int] = field(repr=False, default_factory=list)

    def row(self) -> str:
        cells = [f"{self.summary[m][0]:.2f} ± {self.summary[m][1]:.2f}" for m in METRICS]
        return " | ".join([self.system, *cells])

    def to_dict(self):
        return {"system": self.system,
                "summary": {m: {"mean": v[0], "ci95": v[1]} for m, v in self.summary.items()},
                "queries": self.queries,
                "per_query": self.per_query}

    @classmethod
    def from_dict(cls, d):
        return cls(d["system"], {m: (v["mean"], v["ci95"]) for m, v in d["summary"].items()},
                   d.get("per_query", {}), d.get("queries", []))


def knn_rank(query_embedding, candidates: Mapping[int, Sequence[float]]) -> list[int]:
    """Candidate ids by ascending squared Euclidean distance, ties by id."""
    if not candidates:
        raise ValueError("no candidates to rank")
    ids = np.array(sorted(candidates), dtype=np.int64)
    q = np.asarray(query_embedding, dtype=float)
    mat = np.stack([np.asarray(candidates[int(i)], dtype=float) for i in ids])
    if mat.shape[1:] != q.shape:
        raise ValueError(f"query has dimension {q.shape}, candidates {mat.shape[1:]}")
    d2 = np.sum((mat - q) ** 2, axis=1)
    return [int(i) for i in ids[np.lexsort((ids, d2))]]


def _hits(result: RetrievalResult, k: int):
    grade = {t: g for g, t in enumerate(result.relevant)}
    return [(p, grade[t]) for p, t in enumerate(result.estimated[:k], start=1) if t in grade]


def average_precision_at_k(result: RetrievalResult, cfg: EvalConfig = EvalConfig()) -> float:
    total = 0.0
    for n_hit, (p, _) in enumerate(_hits(result, cfg.k), start=1):
        total += n_hit / p
    return total / cfg.n_relevant


def recall_at_k(result: RetrievalResult, cfg: EvalConfig = EvalConfig()) -> float:
    return len(_hits(result, cfg.k)) / cfg.n_relevant


def reciprocal_rank_at_k(result: RetrievalResult, cfg: EvalConfig = EvalConfig()) -> float:
    hits = _hits(result, cfg.k)
    return 1.0 / hits[0][0] if hits else 0.0


def ndcg_at_k(result: RetrievalResult, cfg: EvalConfig = EvalConfig()) -> float:
    """Graded DCG over the top k, divided by the DCG of the ground-truth order."""
    dcg = sum(cfg.gains[g] / np.log2(p + 1) for p, g in _hits(result, cfg.k))
    ideal = sum(g / np.log2(p + 1) for p, g in enumerate(cfg.gains, start=1))
    return float(dcg / ideal)


METRIC_FUNCS = {"MAP": average_precision_at_k, "Recall": recall_at_k,
                "RR": reciprocal_rank_at_k, "nDCG": ndcg_at_k}


def tag_auc(scores, labels) -> float:
    """ROC AUC by pair counting on ranks; ties count one half."""
    from scipy.stats import rankdata

    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def mean_auc(estimates, truths) -> tuple[float, list[int]]:
    """Unweighted mean of per-tag AUCs; returns (mean, skipped tag indices).

    Tags without both a positive and a negative example are skipped.
    """
    est = np.asarray(estimates, dtype=float)
    y = np.asarray(truths).astype(bool)
    if est.shape != y.shape or est.ndim != 2:
        raise ValueError("estimates and truths must be matching (tracks, tags) matrices")
    aucs, skipped = [], []
    for tag in range(est.shape[1]):
        col = y[:, tag]
        if col.all() or not col.any():
            skipped.append(tag)
            continue
        aucs.append(tag_auc(est[:, tag], col))
    if not aucs:
        raise ValueError("no tag has both positive and negative examples")
    if skipped:
        log.info("mean AUC skipped %d tags without both classes: %s", len(skipped), skipped)
    return float(np.mean(aucs)), skipped


def aggregate_with_ci(values: Sequence[float]) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width, both multiplied by 100."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("a confidence interval needs at least 2 values")
    mean = float(np.mean(v))
    half = 1.96 * float(np.std(v, ddof=1)) / np.sqrt(v.size)
    return 100 * mean, 100 * half


def _estimated_lists(vectors: Mapping[int, Sequence[float]], ids: list[int], mode: str,
                     oracle: OracleConfig) -> dict[int, list[int]]:
    idx = np.array(ids, dtype=np.int64)
    mat = np.stack([np.asarray(vectors[i], dtype=float) for i in ids])
    out = {}
    if mode == "embedding":
        for row, q in enumerate(ids):
            d2 = np.sum((mat - mat[row]) ** 2, axis=1)
            keep = idx != q
            order = np.lexsort((idx[keep], d2[keep]))
            out[q] = idx[keep][order].tolist()
    elif mode == "tag-oracle":
        sim = similarity_matrix(mat, oracle)
        for row, q in enumerate(ids):
            keep = idx != q
            order = np.lexsort((idx[keep], -sim[row, keep]))
            out[q] = idx[keep][order].tolist()
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    return out


def evaluate_rankings(estimated: Mapping[int, Sequence[int]], truth: Mapping[int, RankedList],
                      cfg: EvalConfig = EvalConfig(), system: str = "system") -> MetricsReport:
    """Score estimated lists against the top ``n_relevant`` of each ground truth."""
    queries = sorted(truth)
    if len(queries) < 2:
        raise ValueError("evaluation needs at least 2 queries")
    per_query = {m: [] for m in METRICS}
    for q in queries:
        if q not in estimated:
            raise ValueError(f"no estimated list for query {q}")
        res = RetrievalResult(q, tuple(int(t) for t in estimated[q]),
                              tuple(int(t) for t in truth[q].ids[:cfg.n_relevant]))
        for m in METRICS:
            per_query[m].append(METRIC_FUNCS[m](res, cfg))
    summary = {m: aggregate_with_ci(per_query[m]) for m in METRICS}
    return MetricsReport(system, summary, per_query, queries)


def evaluate_system(vectors: Mapping[int, Sequence[float]], truth: Mapping[int, RankedList],
                    cfg: EvalConfig = EvalConfig(), mode: str = "embedding",
                    oracle: OracleConfig = OracleConfig(), system: str = "system") -> MetricsReport:
    """Rank every test track against the others and score the four metrics.

    ``mode="embedding"`` ranks by Euclidean distance between ``vectors``;
    ``mode="tag-oracle"`` treats ``vectors`` as estimated tag likelihoods and
    ranks by the oracle similarity between them.
    """
    ids = sorted(truth)
    missing = [q for q in ids if q not in vectors]
    if missing:
        raise ValueError(f"missing vectors for {len(missing)} test tracks, e.g. {missing[:5]}")
    return evaluate_rankings(_estimated_lists(vectors, ids, mode, oracle), truth, cfg, system)
