"""Offline triplet mining from ground-truth ranked lists.

Positives for an anchor are its first ``n_positives`` ranked tracks. For the
positive at rank ``i`` the negatives come from ranks ``j > i``, chosen by one
of three strategies:

* ``neighbors``: ranks ``i+1 .. i+n_negatives``, in order.
* ``uniform``: uniform over every rank after ``i``.
* ``distance``: probability proportional to the oracle similarity with the
  anchor, again restricted to ranks after ``i``.

Ranks are 1-based throughout.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .oracle import RankedList

log = logging.getLogger(__name__)

STRATEGIES = ("neighbors", "uniform", "distance")
_ALIASES = {"random-uniform": "uniform", "distance-based": "distance", "random": "uniform"}


def canonical_strategy(name: str) -> str:
    name = _ALIASES.get(name, name)
    if name not in STRATEGIES:
        raise ValueError(f"unknown mining strategy {name!r}, expected one of {STRATEGIES}")
    return name


class ExhaustedError(ValueError):
    """No candidate negative exists after the positive's rank."""


class UniformFallbackWarning(UserWarning):
    """Distance-based sampling had no similarity mass and fell back to uniform."""


@dataclass(frozen=True)
class MiningConfig:
    strategy: str = "distance"
    n_positives: int = 15
    n_negatives: int = 250
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", canonical_strategy(self.strategy))
        if self.n_positives < 1 or self.n_negatives < 1:
            raise ValueError("n_positives and n_negatives must be at least 1")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int
    positive_rank: int
    negative_rank: int


class NegativeSample(NamedTuple):
    ids: np.ndarray
    ranks: np.ndarray
    fallback: bool


@dataclass
class TripletSet:
    """Columnar triplet storage; row order is anchor, then positive rank."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    positive_rank: np.ndarray
    negative_rank: np.ndarray
    strategy: str
    n_fallback: int = 0

    def __len__(self):
        return len(self.anchor)

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k) -> Triplet:
        return Triplet(int(self.anchor[k]), int(self.positive[k]), int(self.negative[k]),
                       int(self.positive_rank[k]), int(self.negative_rank[k]))

    def groups(self) -> list[tuple[int, int, np.ndarray]]:
        """(anchor, positive, negative ids) for each anchor-positive pair, in row order."""
        key = np.stack([self.anchor, self.positive], axis=1)
        if len(key) == 0:
            return []
        change = np.flatnonzero(np.any(key[1:] != key[:-1], axis=1)) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(key)]])
        return [(int(self.anchor[s]), int(self.positive[s]), self.negative[s:e])
                for s, e in zip(starts, ends)]


def triplet_is_valid(trip: Triplet, ranking: RankedList, cfg: MiningConfig) -> bool:
    """True when the triplet respects the ranking: i < j and i <= n_positives."""
    if trip.anchor != ranking.query:
        raise ValueError(f"ranking belongs to track {ranking.query}, triplet anchor is {trip.anchor}")
    if len({trip.anchor, trip.positive, trip.negative}) != 3:
        return False
    try:
        i = ranking.rank_of(trip.positive)
        j = ranking.rank_of(trip.negative)
    except KeyError:
        return False
    if (i, j) != (trip.positive_rank, trip.negative_rank):
        return False
    return i < j and i <= cfg.n_positives


def sample_negatives(ranking: RankedList, positive_rank: int, strategy: str, count: int,
                     rng: np.random.Generator, replace: bool = False) -> NegativeSample:
    """Draw ``count`` negatives from the ranks strictly after ``positive_rank``.

    Without replacement the draw is truncated to the candidate pool. For
    ``distance``, zero-similarity candidates are only used once the
    positive-similarity candidates are exhausted; if there is no similarity
    mass at all the draw is uniform and ``fallback`` is set.
    """
    strategy = canonical_strategy(strategy)
    n = len(ranking)
    if not 1 <= positive_rank <= n:
        raise ValueError(f"positive rank {positive_rank} outside 1..{n}")
    pool = np.arange(positive_rank + 1, n + 1)  # candidate ranks
    if pool.size == 0:
        raise ExhaustedError(f"no candidate after rank {positive_rank} in a list of {n}")
    if not replace:
        count = min(count, pool.size)
    fallback = False
    if strategy == "neighbors":
        if replace:
            ranks = pool[np.arange(count) % pool.size]
        else:
            ranks = pool[:count]
    elif strategy == "uniform":
        ranks = rng.choice(pool, size=count, replace=replace)
    else:
        weights = np.asarray(ranking.scores[pool - 1], dtype=float)
        mass = weights.sum()
        if mass <= 0:
            fallback = True
            ranks = rng.choice(pool, size=count, replace=replace)
        elif replace:
            ranks = rng.choice(pool, size=count, replace=True, p=weights / mass)
        else:
            live = weights > 0
            n_live = int(live.sum())
            if n_live >= count:
                ranks = rng.choice(pool[live], size=count, replace=False, p=weights[live] / mass)
            else:
                # not enough similarity mass for a proportional draw; pad uniformly
                fallback = True
                rest = rng.choice(pool[~live], size=count - n_live, replace=False)
                ranks = np.concatenate([pool[live], rest])
                ranks = ranks[rng.permutation(ranks.size)]
    if fallback:
        warnings.warn(f"distance-based draw for query {ranking.query} after rank {positive_rank} "
                      "fell back to uniform sampling", UniformFallbackWarning, stacklevel=2)
    ranks = np.asarray(ranks, dtype=np.int64)
    return NegativeSample(ranking.ids[ranks - 1], ranks, fallback)


def sample_negative(ranking: RankedList, positive_rank: int, strategy: str,
                    rng: np.random.Generator) -> tuple[int, int]:
    """A single negative (id, rank) for the positive at ``positive_rank``."""
    s = sample_negatives(ranking, positive_rank, strategy, 1, rng)
    return int(s.ids[0]), int(s.ranks[0])


def anchor_rng(seed: int, anchor: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), int(anchor)])


def mine_triplets(rankings: Mapping[int, RankedList], cfg: MiningConfig) -> TripletSet:
    """Pre-select ``n_positives * n_negatives`` triplets for every anchor.

    Each anchor draws from its own generator seeded by ``(cfg.seed, anchor)``,
    so the output does not depend on iteration order.
    """
    if not rankings:
        raise ValueError("no rankings to mine from")
    lengths = {len(r) for r in rankings.values()}
    if len(lengths) != 1:
        raise ValueError("rankings must be untruncated lists over one corpus")
    n_list = lengths.pop()
    if cfg.n_positives + 1 > n_list:
        raise ValueError(f"n_positives={cfg.n_positives} leaves no negative in ranked lists of "
                         f"length {n_list}; need n_positives + 1 <= N - 1")
    if cfg.n_positives + cfg.n_negatives > n_list:
        log.warning("n_negatives=%d exceeds the candidate pool for some positives "
                    "(list length %d); those pairs emit the whole pool",
                    cfg.n_negatives, n_list)
    cols = ([], [], [], [], [])
    n_fallback = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UniformFallbackWarning)
        for anchor in sorted(rankings):
            ranking = rankings[anchor]
            rng = anchor_rng(cfg.seed, anchor)
            for i in range(1, cfg.n_positives + 1):
                s = sample_negatives(ranking, i, cfg.strategy, cfg.n_negatives, rng)
                n_fallback += s.fallback
                k = len(s.ids)
                cols[0].append(np.full(k, anchor))
                cols[1].append(np.full(k, ranking.ids[i - 1]))
                cols[2].append(s.ids)
                cols[3].append(np.full(k, i))
                cols[4].append(s.ranks)
    if n_fallback:
        log.info("%d anchor-positive pairs used the uniform fallback", n_fallback)
    arrays = [np.concatenate(c).astype(np.int64) for c in cols]
    return TripletSet(*arrays, strategy=cfg.strategy, n_fallback=n_fallback)
