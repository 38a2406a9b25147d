"""Oracle similarity over tag-likelihood vectors and ground-truth rankings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

KINDS = ("weighted-jaccard", "weighted-cosine")


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "weighted-jaccard"
    weights: tuple[float, ...] | None = None  # None means unit weights

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown oracle kind {self.kind!r}, expected one of {KINDS}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w <= 0):
                raise ValueError("oracle weights must be a 1-d sequence of positive finite reals")
            object.__setattr__(self, "weights", tuple(float(x) for x in w))

    def weight_vector(self, m: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(m)
        if len(self.weights) != m:
            raise ValueError(f"oracle has {len(self.weights)} weights but tag vectors have length {m}")
        return np.asarray(self.weights, dtype=float)


@dataclass(frozen=True)
class RankedList:
    """Other tracks ordered by descending similarity to ``query``."""

    query: int
    ids: np.ndarray
    scores: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.ids)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.ids, self.scores)]

    def rank_of(self, track_id: int) -> int:
        """1-based rank of ``track_id``; raises KeyError if absent."""
        hit = np.flatnonzero(self.ids == track_id)
        if hit.size == 0:
            raise KeyError(track_id)
        return int(hit[0]) + 1


def _check_tags(t, name):
    t = np.asarray(t, dtype=float)
    if t.ndim != 1:
        raise ValueError(f"{name} must be a 1-d tag vector")
    if not np.all(np.isfinite(t)):
        raise ValueError(f"{name} contains non-finite values")
    return t


def oracle_similarity(t1, t2, cfg: OracleConfig = OracleConfig()) -> float:
    """Similarity in [0, 1] between two tag-likelihood vectors.

    Weighted Jaccard is ``sum(w*min) / sum(w*max)`` with 0/0 taken as 0.
    Weighted cosine is the cosine of ``w*t1`` and ``w*t2`` clipped to [0, 1].
    Both are symmetric bit-for-bit: the summands are computed from
    order-free elementwise ops and summed in index order.
    """
    a = _check_tags(t1, "t1")
    b = _check_tags(t2, "t2")
    if a.shape != b.shape:
        raise ValueError(f"tag vectors differ in length: {a.size} vs {b.size}")
    w = cfg.weight_vector(a.size)
    if cfg.kind == "weighted-jaccard":
        num = float(np.sum(w * np.minimum(a, b)))
        den = float(np.sum(w * np.maximum(a, b)))
        return num / den if den > 0 else 0.0
    wa, wb = w * a, w * b
    na, nb = float(np.sqrt(np.sum(wa * wa))), float(np.sqrt(np.sum(wb * wb)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    # na*nb is commutative, so the result stays symmetric
    return float(np.clip(np.sum(wa * wb) / (na * nb), 0.0, 1.0))


def similarity_matrix(tags: np.ndarray, cfg: OracleConfig = OracleConfig()) -> np.ndarray:
    """Pairwise oracle similarities for an (n, m) tag matrix.

    Row by row, this uses the same reductions as :func:`oracle_similarity`, so
    entries are bitwise equal to the scalar calls.
    """
    tags = np.asarray(tags, dtype=float)
    if tags.ndim != 2:
        raise ValueError("tags must be an (n, m) matrix")
    if not np.all(np.isfinite(tags)):
        raise ValueError("tag matrix contains non-finite values")
    w = cfg.weight_vector(tags.shape[1])
    n = len(tags)
    out = np.zeros((n, n))
    if cfg.kind == "weighted-jaccard":
        for row in range(n):
            num = np.sum(w * np.minimum(tags[row], tags), axis=1)
            den = np.sum(w * np.maximum(tags[row], tags), axis=1)
            np.divide(num, den, out=out[row], where=den > 0)
        return out
    wt = tags * w
    norms = np.sqrt(np.sum(wt * wt, axis=1))
    for row in range(n):
        dots = np.sum(wt[row] * wt, axis=1)
        denom = norms[row] * norms
        np.divide(dots, denom, out=out[row], where=denom > 0)
    return np.clip(out, 0.0, 1.0)


def _as_corpus(corpus_tags: Mapping[int, Sequence[float]]):
    ids = np.array(sorted(int(k) for k in corpus_tags), dtype=np.int64)
    tags = np.array([np.asarray(corpus_tags[int(i)], dtype=float) for i in ids])
    return ids, tags


def _ranked(query: int, ids: np.ndarray, scores: np.ndarray) -> RankedList:
    # lexsort: last key is primary -> descending score, then ascending id
    order = np.lexsort((ids, -scores))
    return RankedList(int(query), ids[order].copy(), scores[order].copy())


def rank_by_similarity(query: int, corpus_tags: Mapping[int, Sequence[float]],
                       cfg: OracleConfig = OracleConfig()) -> RankedList:
    """Ground-truth ranking of every other corpus track for ``query``."""
    if query not in corpus_tags:
        raise KeyError(f"query track {query} is not in the corpus")
    if len(corpus_tags) < 2:
        raise ValueError("ranking needs a corpus of at least 2 tracks")
    ids, tags = _as_corpus(corpus_tags)
    q = tags[np.searchsorted(ids, query)]
    others = ids != query
    scores = np.array([oracle_similarity(q, t, cfg) for t in tags[others]])
    return _ranked(query, ids[others], scores)


def rank_all(corpus_tags: Mapping[int, Sequence[float]],
             cfg: OracleConfig = OracleConfig()) -> dict[int, RankedList]:
    """Rankings for every track of the corpus, one per query."""
    if len(corpus_tags) < 2:
        raise ValueError("ranking needs a corpus of at least 2 tracks")
    ids, tags = _as_corpus(corpus_tags)
    sim = similarity_matrix(tags, cfg)
    out = {}
    for row, q in enumerate(ids):
        others = np.arange(len(ids)) != row
        out[int(q)] = _ranked(int(q), ids[others], sim[row, others])
    return out


def similarity_profile(rankings: Mapping[int, RankedList] | Sequence[RankedList]) -> np.ndarray:
    """Mean similarity at each rank position across all queries."""
    lists = list(rankings.values()) if isinstance(rankings, Mapping) else list(rankings)
    if not lists:
        raise ValueError("similarity profile of an empty corpus")
    lengths = {len(r) for r in lists}
    if len(lengths) != 1:
        raise ValueError("rankings must all be untruncated over the same corpus")
    return np.mean(np.stack([r.scores for r in lists]), axis=0)
