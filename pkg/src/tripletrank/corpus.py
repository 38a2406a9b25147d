"""Synthetic track corpus: tag likelihoods plus patches that depend on them.

Each tag owns a fixed F x T prototype pattern (a spectral profile times a
periodic temporal envelope). A patch is the likelihood-weighted sum of the
active prototypes, each circularly shifted in time, plus Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class CorpusConfig:
    n_tracks: int = 600
    n_tags: int = 24
    patch_freq_bins: int = 24
    patch_frames: int = 64
    tags_per_track: tuple[int, int] = (3, 9)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.tags_per_track
        object.__setattr__(self, "tags_per_track", (int(lo), int(hi)))
        if self.n_tracks < 3:
            raise ValueError("n_tracks must be at least 3")
        if self.n_tags < 1 or self.patch_freq_bins < 1 or self.patch_frames < 1:
            raise ValueError("n_tags, patch_freq_bins and patch_frames must be positive")
        if not 1 <= lo <= hi <= self.n_tags:
            raise ValueError(f"tags_per_track {self.tags_per_track} must satisfy 1 <= lo <= hi <= n_tags")
        if not np.isfinite(self.noise_sigma) or self.noise_sigma < 0:
            raise ValueError("noise_sigma must be a non-negative real")

    def to_dict(self):
        d = asdict(self)
        d["tags_per_track"] = list(self.tags_per_track)
        return d


@dataclass(frozen=True)
class Track:
    id: int
    tags: np.ndarray = field(repr=False)
    seed: int = 0  # per-track stream for patch sampling

    @property
    def n_active(self) -> int:
        return int(np.count_nonzero(self.tags > 0))


@dataclass
class Corpus:
    config: CorpusConfig
    tracks: dict[int, Track]
    prototypes: np.ndarray  # (m, F, T)

    @property
    def ids(self) -> list[int]:
        return sorted(self.tracks)

    def tags_map(self, ids: Iterable[int] | None = None) -> dict[int, np.ndarray]:
        ids = self.ids if ids is None else ids
        return {int(i): self.tracks[int(i)].tags for i in ids}

    def tag_matrix(self, ids: Sequence[int] | None = None) -> np.ndarray:
        ids = self.ids if ids is None else ids
        return np.stack([self.tracks[int(i)].tags for i in ids])

    def patches(self, track_id: int, count: int, seed: int, shift: bool = True) -> np.ndarray:
        return sample_patches(self.tracks[int(track_id)], self.prototypes, count,
                              self.config.noise_sigma, seed, shift=shift)


@dataclass(frozen=True)
class Split:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    def to_dict(self):
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}


def _prototype(rng: np.random.Generator, n_freq: int, n_frames: int) -> np.ndarray:
    bins = np.arange(n_freq)
    profile = np.zeros(n_freq)
    for _ in range(2):
        centre = rng.uniform(0, n_freq)
        width = rng.uniform(0.8, 2.0)
        profile += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((bins - centre) / width) ** 2)
    period = rng.uniform(4.0, max(4.0, n_frames / 4))
    phase = rng.uniform(0, 2 * np.pi)
    envelope = 0.5 + 0.5 * np.cos(2 * np.pi * np.arange(n_frames) / period + phase)
    return np.outer(profile, envelope)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Draw a corpus from ``cfg.seed``; identical configs give identical corpora."""
    rng = np.random.default_rng(cfg.seed)
    prototypes = np.stack([_prototype(rng, cfg.patch_freq_bins, cfg.patch_frames)
                           for _ in range(cfg.n_tags)])
    lo, hi = cfg.tags_per_track
    tracks = {}
    for tid in range(cfg.n_tracks):
        k = int(rng.integers(lo, hi + 1))
        active = rng.choice(cfg.n_tags, size=k, replace=False)
        tags = np.zeros(cfg.n_tags)
        # uniform on (0.2, 1.0]
        tags[active] = 1.0 - rng.uniform(0.0, 0.8, size=k)
        tracks[tid] = Track(tid, tags, seed=int(rng.integers(2**63)))
    return Corpus(cfg, tracks, prototypes)


def sample_patches(track: Track, prototypes: np.ndarray, count: int, noise_sigma: float,
                   seed: int, shift: bool = True) -> np.ndarray:
    """Draw ``count`` patches of shape (F, T) for ``track``.

    Every active prototype gets its own random circular time shift per patch;
    ``shift=False`` pins all shifts at zero. The stream is seeded from
    ``(seed, track.seed)`` so tracks can be sampled independently.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    m, n_freq, n_frames = prototypes.shape
    if track.tags.shape != (m,):
        raise ValueError(f"track {track.id} has {track.tags.size} tags, prototypes have {m}")
    rng = np.random.default_rng([int(seed) & (2**64 - 1), track.seed])
    active = np.flatnonzero(track.tags > 0)
    out = np.zeros((count, n_freq, n_frames))
    if shift:
        shifts = rng.integers(0, n_frames, size=(count, active.size))
    else:
        shifts = np.zeros((count, active.size), dtype=np.int64)
    frames = np.arange(n_frames)
    for col, tag in enumerate(active):
        idx = (frames[None, :] - shifts[:, col:col + 1]) % n_frames  # (count, T)
        out += track.tags[tag] * prototypes[tag][:, idx].transpose(1, 0, 2)
    if noise_sigma > 0:
        out += rng.normal(0.0, noise_sigma, size=out.shape)
    return out


def partition_sizes(n: int, ratios: Sequence[float] = (0.6, 0.2, 0.2)) -> tuple[int, ...]:
    """Largest-remainder part sizes for ``n`` items, each requested part non-empty."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    exact = ratios * n
    sizes = np.floor(exact + 1e-9).astype(int)
    remainder = n - sizes.sum()
    for k in np.argsort(-(exact - sizes), kind="stable")[:remainder]:
        sizes[k] += 1
    # keep every requested part non-empty (matters only for tiny corpora)
    for k in np.flatnonzero((sizes == 0) & (ratios > 0)):
        sizes[np.argmax(sizes)] -= 1
        sizes[k] += 1
    return tuple(int(s) for s in sizes)


def split_corpus(ids: Sequence[int], ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> Split:
    """Random train/validation/test partition with largest-remainder sizing."""
    ids = np.array(sorted(int(i) for i in ids), dtype=np.int64)
    n = len(ids)
    if n < 3:
        raise ValueError("cannot split a corpus smaller than 3 tracks")
    sizes = partition_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(ids)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(tuple(sorted(int(i) for i in perm[:a])),
                 tuple(sorted(int(i) for i in perm[a:b])),
                 tuple(sorted(int(i) for i in perm[b:])))


def binarize_tags(t, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(t, dtype=float) >= threshold).astype(np.int8)
