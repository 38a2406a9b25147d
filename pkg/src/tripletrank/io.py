"""On-disk formats.

Structured text is JSON (sorted keys, fixed float rounding where the format
says so). Arrays are flat little-endian float32 files with a JSON sidecar.
Triplets are CSV with one record per triplet.
"""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Mapping

import numpy as np

from .corpus import Corpus, CorpusConfig, Split, Track
from .mining import TripletSet, canonical_strategy
from .network import ModelConfig, Network
from .oracle import RankedList

F32 = np.dtype("<f4")
SCORE_DIGITS = 6


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_json(path):
    return json.loads(Path(path).read_text())


def write_f32(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=F32).tofile(path)


def read_f32(path, shape=None):
    data = np.fromfile(path, dtype=F32).astype(float)
    return data if shape is None else data.reshape(shape)


# ---------------------------------------------------------------- corpus

def save_corpus(corpus: Corpus, directory, eval_patches: int = 8, patch_seed: int = 0):
    """Manifest, prototypes and the fixed evaluation patches of every track."""
    d = Path(directory)
    cfg = corpus.config
    write_json(d / "manifest.json", {
        "config": cfg.to_dict(),
        "prototypes": {"file": "prototypes.f32", "shape": list(corpus.prototypes.shape)},
        "tracks": [{"id": t, "seed": str(corpus.tracks[t].seed),
                    "tags": [float(x) for x in corpus.tracks[t].tags]} for t in corpus.ids],
    })
    write_f32(d / "prototypes.f32", corpus.prototypes)
    records, arrays = [], []
    for t in corpus.ids:
        patches = corpus.patches(t, eval_patches, patch_seed)
        for k, p in enumerate(patches):
            records.append({"track": t, "patch": k, "offset": len(arrays)})
            arrays.append(p)
    write_f32(d / "patches.f32", np.stack(arrays))
    write_json(d / "patches.json", {"F": cfg.patch_freq_bins, "T": cfg.patch_frames,
                                    "dtype": "float32-le", "seed": patch_seed, "records": records})


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    raw = dict(manifest["config"])
    raw["tags_per_track"] = tuple(raw["tags_per_track"])
    cfg = CorpusConfig(**raw)
    tracks = {r["id"]: Track(r["id"], np.array(r["tags"], dtype=float), int(r["seed"]))
              for r in manifest["tracks"]}
    proto = manifest["prototypes"]
    return Corpus(cfg, tracks, read_f32(d / proto["file"], tuple(proto["shape"])))


def load_patches(directory) -> dict[int, np.ndarray]:
    d = Path(directory)
    side = read_json(d / "patches.json")
    data = read_f32(d / "patches.f32", (-1, side["F"], side["T"]))
    out: dict[int, list] = {}
    for r in side["records"]:
        out.setdefault(r["track"], []).append(data[r["offset"]])
    return {t: np.stack(v) for t, v in out.items()}


def save_split(split: Split, path):
    write_json(path, split.to_dict())


def load_split(path) -> Split:
    d = read_json(path)
    return Split(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


# ---------------------------------------------------------------- rankings

def save_rankings(rankings: Mapping[int, RankedList], path):
    write_json(path, {"rankings": [
        {"query": q, "entries": [[int(i), round(float(s), SCORE_DIGITS)]
                                 for i, s in zip(rankings[q].ids, rankings[q].scores)]}
        for q in sorted(rankings)]})


def load_rankings(path) -> dict[int, RankedList]:
    out = {}
    for rec in read_json(path)["rankings"]:
        entries = rec["entries"]
        out[rec["query"]] = RankedList(rec["query"], np.array([e[0] for e in entries], dtype=np.int64),
                                       np.array([e[1] for e in entries], dtype=float))
    return out


# ---------------------------------------------------------------- triplets

TRIPLET_FIELDS = ("anchor", "positive", "negative", "i", "j", "strategy")


def save_triplets(triplets: TripletSet, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = np.stack([triplets.anchor, triplets.positive, triplets.negative,
                     triplets.positive_rank, triplets.negative_rank], axis=1)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRIPLET_FIELDS) + "\n")
        if len(cols):
            np.savetxt(fh, cols, fmt="%d", delimiter=",", newline=f",{triplets.strategy}\n")


def load_triplets(path) -> TripletSet:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
        if tuple(header) != TRIPLET_FIELDS:
            raise ValueError(f"{path}: unexpected triplet header {header}")
        first = fh.readline()
    strategy = canonical_strategy(first.strip().split(",")[-1]) if first else "distance"
    data = np.loadtxt(path, delimiter=",", skiprows=1, usecols=range(5), dtype=np.int64, ndmin=2)
    return TripletSet(*(data[:, k].copy() for k in range(5)), strategy=strategy)


# ---------------------------------------------------------------- model

def save_params(net: Network, directory, extra: dict | None = None):
    """``params.f32`` holds every array in header order; ``params.json`` the layout."""
    d = Path(directory)
    arrays, layout, offset = [], [], 0
    for name, value in net.params.items():
        layout.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size
        arrays.append(value.reshape(-1))
    write_f32(d / "params.f32", np.concatenate(arrays))
    header = {"model": net.config.to_dict(), "arrays": layout, "dtype": "float32-le"}
    if "autopool.alpha" in net.params:
        header["autopool_alpha"] = [float(a) for a in net.params["autopool.alpha"].astype(F32)]
    if extra:
        header.update(extra)
    write_json(d / "params.json", header)


def load_params(directory) -> Network:
    d = Path(directory)
    header = read_json(d / "params.json")
    flat = read_f32(d / "params.f32")
    params = {}
    for a in header["arrays"]:
        n = int(np.prod(a["shape"])) if a["shape"] else 1
        params[a["name"]] = flat[a["offset"]:a["offset"] + n].reshape(a["shape"])
    return Network(ModelConfig(**header["model"]), params)


# ---------------------------------------------------------------- vectors

def save_vectors(vectors: Mapping[int, np.ndarray], path, kind: str):
    write_json(path, {"kind": kind, "dim": int(len(next(iter(vectors.values())))),
                      "records": [{"id": int(t), "vector": [float(x) for x in vectors[t]]}
                                  for t in sorted(vectors)]})


def load_vectors(path) -> tuple[str, dict[int, np.ndarray]]:
    d = read_json(path)
    return d["kind"], {r["id"]: np.array(r["vector"], dtype=float) for r in d["records"]}
