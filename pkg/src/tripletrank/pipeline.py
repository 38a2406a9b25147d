"""End-to-end experiment: generate, rank, mine, train, embed, evaluate, report.

Every stage writes into its own directory under the output root together
with a ``stage.json`` marker holding a hash of the stage's configuration and
of its upstream stages. A stage whose marker matches is skipped on rerun, so
deleting a stage directory and rerunning regenerates exactly that stage.
Stages read their inputs from disk, never from memory, which keeps a resumed
run byte-identical to a fresh one.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
import shutil
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import io as fmt
from .corpus import CorpusConfig, binarize_tags, generate_corpus, partition_sizes, split_corpus
from .evaluation import METRICS, EvalConfig, MetricsReport, evaluate_system, mean_auc
from .mining import MiningConfig, canonical_strategy, mine_triplets
from .network import LayerSpec, ModelConfig, Network
from .oracle import OracleConfig, rank_all, similarity_profile
from .training import TrainConfig, train_tagger, train_triplet

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
TABLE_ORDER = ("at", "tl-neighbors", "tl-uniform", "tl-distance", "tl-autopool")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage


@dataclass(frozen=True)
class System:
    key: str
    label: str
    mode: str  # "tag" or "embed"
    temporal_pool: str = "max"
    strategy: str | None = None


_STRATEGY_LABELS = {"neighbors": "Neighbors", "uniform": "Random uniform", "distance": "Distance-based"}


def parse_system(key: str) -> System:
    """``at``, ``tl-<strategy>``, ``tl-autopool`` or ``tl-autopool-<strategy>``."""
    if key == "at":
        return System("at", "AT Baseline", "tag")
    parts = key.split("-")
    if parts[0] != "tl" or len(parts) < 2:
        raise ValueError(f"unknown system {key!r}")
    if parts[1] == "autopool":
        strategy = canonical_strategy("-".join(parts[2:]) or "distance")
        name = "tl-autopool" if strategy == "distance" else f"tl-autopool-{strategy}"
        return System(name, f"TL Autopool ({_STRATEGY_LABELS[strategy]})", "embed", "autopool", strategy)
    strategy = canonical_strategy("-".join(parts[1:]))
    return System(f"tl-{strategy}", f"TL {_STRATEGY_LABELS[strategy]}", "embed", "max", strategy)


def _order_key(key):
    return (TABLE_ORDER.index(key) if key in TABLE_ORDER else len(TABLE_ORDER), key)


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusConfig = CorpusConfig()
    oracle: OracleConfig = OracleConfig()
    mining: MiningConfig = MiningConfig()
    model: ModelConfig = ModelConfig()
    training: TrainConfig = TrainConfig()
    tagger_training: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    eval_patches: int = 8
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    systems: tuple[str, ...] = TABLE_ORDER
    out_dir: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(r) for r in self.split))
        object.__setattr__(self, "systems", tuple(parse_system(s).key for s in self.systems))
        self.validate()

    def validate(self):
        m = self.corpus.n_tags
        if self.model.n_tags != m:
            raise ValueError(f"model.n_tags={self.model.n_tags} disagrees with corpus.n_tags={m}")
        if self.oracle.weights is not None and len(self.oracle.weights) != m:
            raise ValueError(f"oracle has {len(self.oracle.weights)} weights for {m} tags")
        if tuple(self.model.input_shape) != (self.corpus.patch_freq_bins, self.corpus.patch_frames):
            raise ValueError("model.input_shape must equal (patch_freq_bins, patch_frames)")
        sizes = partition_sizes(self.corpus.n_tracks, self.split)
        if any(s < 2 for s in sizes):
            raise ValueError(f"split sizes {sizes} leave a set with fewer than 2 tracks")
        if any(parse_system(s).mode == "embed" for s in self.systems):
            for name, n in zip(("train", "validation"), sizes[:2]):
                if self.mining.n_positives + 1 > n - 1:
                    raise ValueError(f"n_positives={self.mining.n_positives} needs n_positives + 1 <= N - 1 "
                                     f"but the {name} set has N={n}")
        if self.eval.n_relevant > self.eval.k:
            raise ValueError("eval.n_relevant must not exceed eval.k")
        if self.eval.k > sizes[2] - 1:
            log.warning("k=%d exceeds the %d candidates of the test set", self.eval.k, sizes[2] - 1)
        if self.eval_patches < 1:
            raise ValueError("eval_patches must be at least 1")
        if not self.systems:
            raise ValueError("no systems requested")

    def to_dict(self):
        return {
            "corpus": self.corpus.to_dict(),
            "oracle": {"kind": self.oracle.kind,
                       "weights": None if self.oracle.weights is None else list(self.oracle.weights)},
            "mining": {"strategy": self.mining.strategy, "n_positives": self.mining.n_positives,
                       "n_negatives": self.mining.n_negatives, "seed": self.mining.seed},
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "tagger_training": self.tagger_training.to_dict(),
            "eval": self.eval.to_dict(),
            "eval_patches": self.eval_patches,
            "split": list(self.split),
            "systems": list(self.systems),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        section_types = {"corpus": CorpusConfig, "oracle": OracleConfig, "mining": MiningConfig,
                         "training": TrainConfig, "tagger_training": TrainConfig, "eval": EvalConfig}
        for name, typ in section_types.items():
            if name in d:
                sub = dict(d[name])
                if name == "corpus" and "tags_per_track" in sub:
                    sub["tags_per_track"] = tuple(sub["tags_per_track"])
                if name == "oracle" and sub.get("weights") is not None:
                    sub["weights"] = tuple(sub["weights"])
                if name == "eval" and sub.get("gains") is not None:
                    sub["gains"] = tuple(sub["gains"])
                kw[name] = typ(**sub)
        corpus = kw.get("corpus", CorpusConfig())
        model = dict(d.get("model", {}))
        model.setdefault("input_shape", (corpus.patch_freq_bins, corpus.patch_frames))
        model.setdefault("n_tags", corpus.n_tags)
        if "layers" in model:
            model["layers"] = tuple(LayerSpec(**l) for l in model["layers"])
        kw["model"] = ModelConfig(**model)
        for name in ("eval_patches", "out_dir", "seed"):
            if name in d:
                kw[name] = d[name]
        if "split" in d:
            kw["split"] = tuple(d["split"])
        if "systems" in d:
            kw["systems"] = tuple(d["systems"])
        return cls(**kw)


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def derive_seed(seed: int, *labels: str) -> int:
    h = hashlib.sha256(json.dumps([int(seed), *labels]).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- stage runner

class Experiment:
    """Stage orchestration over one output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: str | Path | None = None):
        self.config = config
        self.root = Path(out_dir if out_dir is not None else config.out_dir)

    # seeds are derived from the global seed so one number pins the run
    @property
    def corpus_config(self) -> CorpusConfig:
        return replace(self.config.corpus, seed=derive_seed(self.config.seed, "corpus"))

    def mining_config(self, strategy: str, part: str) -> MiningConfig:
        return replace(self.config.mining, strategy=strategy,
                       seed=derive_seed(self.config.seed, "mine", strategy, part))

    def train_config(self, system: System) -> TrainConfig:
        base = self.config.tagger_training if system.mode == "tag" else self.config.training
        return replace(base, seed=derive_seed(self.config.seed, "train"))

    def model_config(self, system: System) -> ModelConfig:
        return replace(self.config.model, mode=system.mode, temporal_pool=system.temporal_pool)

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def _marker(self, stage_dir: Path) -> dict | None:
        p = stage_dir / "stage.json"
        return fmt.read_json(p) if p.exists() else None

    def stage_hash(self, stage_dir: Path) -> str:
        marker = self._marker(stage_dir)
        if marker is None or marker.get("status") != "done":
            raise StageError(stage_dir.name, f"required stage output {stage_dir} is missing; run it first")
        return marker["hash"]

    def run_stage(self, name: str, stage_dir: Path, spec: dict, upstream: list[Path],
                  body: Callable[[Path], None], force: bool = False) -> str:
        """Run ``body`` unless ``stage_dir`` already holds output for the same inputs."""
        digest = _hash({"stage": name, "spec": spec,
                        "upstream": [self.stage_hash(u) for u in upstream]})
        marker = self._marker(stage_dir)
        if not force and marker and marker.get("status") == "done" and marker.get("hash") == digest:
            log.info("stage %s up to date (%s)", name, stage_dir)
            return digest
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True)
        log.info("running stage %s -> %s", name, stage_dir)
        try:
            body(stage_dir)
        except Exception as exc:
            fmt.write_json(stage_dir / "stage.json", {"stage": name, "hash": digest, "status": "failed",
                                                      "error": f"{type(exc).__name__}: {exc}"})
            (stage_dir / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        fmt.write_json(stage_dir / "stage.json", {"stage": name, "hash": digest, "status": "done"})
        return digest

    # ------------------------------------------------------------ stages

    def generate(self, force=False):
        cfg = self.config
        spec = {"corpus": self.corpus_config.to_dict(), "split": list(cfg.split),
                "eval_patches": cfg.eval_patches, "seed": cfg.seed}

        def body(d):
            corpus = generate_corpus(self.corpus_config)
            fmt.save_corpus(corpus, d, cfg.eval_patches, derive_seed(cfg.seed, "eval-patches"))
            fmt.save_split(split_corpus(corpus.ids, cfg.split, derive_seed(cfg.seed, "split")),
                           d / "split.json")

        return self.run_stage("generate", self.path("corpus"), spec, [], body, force)

    def load_corpus(self):
        self.stage_hash(self.path("corpus"))
        return fmt.load_corpus(self.path("corpus")), fmt.load_split(self.path("corpus", "split.json"))

    def rank(self, force=False):
        spec = {"oracle": self.config.to_dict()["oracle"]}

        def body(d):
            corpus, split = self.load_corpus()
            for part in SPLITS:
                fmt.save_rankings(rank_all(corpus.tags_map(getattr(split, part)), self.config.oracle),
                                  d / f"{part}.json")

        return self.run_stage("rank", self.path("rankings"), spec, [self.path("corpus")], body, force)

    def rankings(self, part: str):
        self.stage_hash(self.path("rankings"))
        return fmt.load_rankings(self.path("rankings", f"{part}.json"))

    def mine(self, strategy: str, force=False):
        strategy = canonical_strategy(strategy)
        spec = {part: self.mining_config(strategy, part).__dict__ for part in ("train", "validation")}

        def body(d):
            for part in ("train", "validation"):
                trips = mine_triplets(self.rankings(part), self.mining_config(strategy, part))
                fmt.save_triplets(trips, d / f"{part}.csv")

        return self.run_stage("mine", self.path("mining", strategy), spec, [self.path("rankings")], body, force)

    def train(self, system: System, force=False):
        tcfg = self.train_config(system)
        mcfg = self.model_config(system)
        spec = {"model": mcfg.to_dict(), "training": tcfg.to_dict()}
        upstream = [self.path("corpus")]
        if system.mode == "embed":
            upstream.append(self.path("mining", system.strategy))

        def body(d):
            corpus, split = self.load_corpus()
            if system.mode == "embed":
                trips = fmt.load_triplets(self.path("mining", system.strategy, "train.csv"))
                val = fmt.load_triplets(self.path("mining", system.strategy, "validation.csv"))
                net, report = train_triplet(corpus, trips, val, mcfg, tcfg)
            else:
                net, report = train_tagger(corpus, split, mcfg, tcfg)
            fmt.save_params(net, d, {"system": system.key, "seed": str(tcfg.seed)})
            fmt.write_json(d / "train_report.json", report.to_dict())
            with open(d / "loss.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["epoch", "train", "val"])
                for e, (a, b) in enumerate(zip(report.train_loss, report.val_loss), start=1):
                    w.writerow([e, repr(a), repr(b)])

        return self.run_stage("train", self.path("models", system.key), spec, upstream, body, force)

    def embed(self, system: System, force=False):
        """Track-level vectors: the mean network output over the stored test patches."""
        kind = "tag-estimate" if system.mode == "tag" else "embedding"

        def body(d):
            corpus, split = self.load_corpus()
            net = fmt.load_params(self.path("models", system.key))
            patches = fmt.load_patches(self.path("corpus"))
            vectors = {}
            for t in split.test:
                out, _ = net.forward(patches[t])
                vectors[t] = out.mean(axis=0)
            fmt.save_vectors(vectors, d / "vectors.json", kind)

        return self.run_stage("embed", self.path("outputs", system.key), {"kind": kind},
                              [self.path("corpus"), self.path("models", system.key)], body, force)

    def evaluate(self, system: System, force=False):
        cfg = self.config

        def body(d):
            kind, vectors = fmt.load_vectors(self.path("outputs", system.key, "vectors.json"))
            truth = self.rankings("test")
            mode = "tag-oracle" if kind == "tag-estimate" else "embedding"
            report = evaluate_system(vectors, truth, cfg.eval, mode, cfg.oracle, system=system.label)
            out = report.to_dict()
            out["key"] = system.key
            if kind == "tag-estimate":
                corpus, _ = self.load_corpus()
                ids = sorted(vectors)
                auc, skipped = mean_auc(np.stack([vectors[t] for t in ids]),
                                        np.stack([binarize_tags(corpus.tracks[t].tags,
                                                                cfg.tagger_training.binarize_threshold)
                                                  for t in ids]))
                out["mean_auc"] = auc
                out["auc_skipped_tags"] = skipped
            fmt.write_json(d / "metrics.json", out)

        return self.run_stage("evaluate", self.path("eval", system.key), {"eval": cfg.eval.to_dict(),
                                                                          "oracle": cfg.to_dict()["oracle"]},
                              [self.path("rankings"), self.path("outputs", system.key)], body, force)

    def profile(self, force=False):
        """Fig.-1-style curve over the whole corpus."""

        def body(d):
            corpus, _ = self.load_corpus()
            prof = similarity_profile(rank_all(corpus.tags_map(), self.config.oracle))
            write_profile(prof, d / "similarity_profile.csv")

        return self.run_stage("profile", self.path("profile"), {"oracle": self.config.to_dict()["oracle"]},
                              [self.path("corpus")], body, force)

    def report(self, force=False):
        systems = [parse_system(s) for s in self.config.systems]
        upstream = [self.path("profile")] + [self.path("eval", s.key) for s in systems] \
            + [self.path("models", s.key) for s in systems]
        missing = [str(u.relative_to(self.root)) for u in upstream
                   if (self._marker(u) or {}).get("status") != "done"]
        if missing:
            raise StageError("report", f"incomplete experiment, missing stages: {missing}")

        def body(d):
            emit_report(collect_report(self), d)

        return self.run_stage("report", self.path("report"), {"config": self.config.to_dict()},
                              upstream, body, force)

    def run(self):
        """Every stage in order; up-to-date stages are skipped."""
        cfg = self.config
        systems = sorted((parse_system(s) for s in cfg.systems), key=lambda s: _order_key(s.key))
        self.generate()
        self.rank()
        self.profile()
        for strategy in sorted({s.strategy for s in systems if s.strategy}):
            self.mine(strategy)
        for s in systems:
            self.train(s)
            self.embed(s)
            self.evaluate(s)
        self.report()
        return fmt.read_json(self.path("report", "report.json"))


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Run (or resume) the whole pipeline and return the report record."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return Experiment(config, out_dir).run()


# ---------------------------------------------------------------- report

def write_profile(profile, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "mean_similarity"])
        for r, v in enumerate(profile, start=1):
            w.writerow([r, f"{v:.6f}"])


def read_profile(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["mean_similarity"]) for r in rows])


def collect_report(exp: Experiment) -> dict:
    cfg = exp.config
    systems = sorted((parse_system(s) for s in cfg.systems), key=lambda s: _order_key(s.key))
    rows, curves = [], {}
    for s in systems:
        m = fmt.read_json(exp.path("eval", s.key, "metrics.json"))
        tr = fmt.read_json(exp.path("models", s.key, "train_report.json"))
        header = fmt.read_json(exp.path("models", s.key, "params.json"))
        row = {"key": s.key, "label": s.label, "summary": m["summary"],
               "params_file": str(Path("models", s.key, "params.f32")), "seed": header["seed"],
               "best_epoch": tr["best_epoch"], "stopped_epoch": tr["stopped_epoch"]}
        if "mean_auc" in m:
            row["mean_auc"] = m["mean_auc"]
        if "autopool_alpha" in header:
            row["autopool_alpha"] = header["autopool_alpha"]
        rows.append(row)
        curves[s.key] = {"label": s.label, "train": tr["train_loss"], "val": tr["val_loss"]}
    profile = read_profile(exp.path("profile", "similarity_profile.csv"))
    return {
        "rows": rows,
        "loss_curves": curves,
        "similarity_profile": [float(v) for v in profile],
        "config": cfg.to_dict(),
        "seeds": {"global": cfg.seed, "corpus": str(exp.corpus_config.seed),
                  "train": str(derive_seed(cfg.seed, "train"))},
        "versions": {"tripletrank": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }


def format_table(rows) -> str:
    """Aligned text table of mean ± CI half-width (both x100, 2 decimals)."""
    header = ["Model", *(f"{m}@k" for m in METRICS)]
    body = [[r["label"], *(f"{r['summary'][m]['mean']:.2f} ± {r['summary'][m]['ci95']:.2f}" for m in METRICS)]
            for r in rows]
    widths = [max(len(line[c]) for line in [header, *body]) for c in range(len(header))]
    out = io.StringIO()
    for line in [header, ["-" * w for w in widths], *body]:
        out.write("  ".join(cell.ljust(w) if c == 0 else cell.rjust(w)
                            for c, (cell, w) in enumerate(zip(line, widths))).rstrip() + "\n")
    return out.getvalue()


def emit_report(report: dict, directory) -> list[Path]:
    """Write the table, delimited data files, figures and the JSON record."""
    from . import plotting

    required = ("rows", "loss_curves", "similarity_profile", "config")
    missing = [k for k in required if not report.get(k)]
    if missing:
        raise ValueError(f"incomplete report, missing: {missing}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    k = report["config"]["eval"]["k"]
    table = format_table(report["rows"]).replace("@k", f"@{k}")
    (d / "table.txt").write_text(table)
    written.append(d / "table.txt")

    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "label", "metric", "mean", "ci95"])
        for r in report["rows"]:
            for m in METRICS:
                w.writerow([r["key"], r["label"], f"{m}@{k}", f"{r['summary'][m]['mean']:.2f}",
                            f"{r['summary'][m]['ci95']:.2f}"])
    written.append(d / "metrics.csv")

    write_profile(report["similarity_profile"], d / "similarity_profile.csv")
    written.append(d / "similarity_profile.csv")

    with open(d / "loss_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["system", "epoch", "train", "val"])
        for key, c in report["loss_curves"].items():
            for e, (a, b) in enumerate(zip(c["train"], c["val"]), start=1):
                w.writerow([key, e, f"{a:.6f}", f"{b:.6f}"])
    written.append(d / "loss_curves.csv")

    fmt.write_json(d / "report.json", report)
    written.append(d / "report.json")

    written.append(plotting.plot_similarity_profile(report["similarity_profile"], d / "similarity_profile.png"))
    written.append(plotting.plot_loss_curves(
        {c["label"]: (c["train"], c["val"]) for c in report["loss_curves"].values()}, d / "loss_curves.png"))
    written.append(plotting.plot_metrics(
        [(r["label"], {m: (r["summary"][m]["mean"], r["summary"][m]["ci95"]) for m in METRICS})
         for r in report["rows"]], METRICS, d / "metrics.png"))
    return written
