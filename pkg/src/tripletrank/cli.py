"""Command-line entry point: ``tripletrank <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

from . import io as fmt
from .pipeline import (Experiment, ExperimentConfig, StageError, emit_report, load_config,
                       parse_system, read_profile)

log = logging.getLogger("tripletrank")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _train_system(args) -> str:
    if args.system:
        return parse_system(args.system).key
    if args.mode == "tagger":
        return "at"
    strategy = args.strategy or "distance"
    return parse_system(f"tl-autopool-{strategy}" if args.pool == "autopool" else f"tl-{strategy}").key


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    mining = {k: v for k, v in (("strategy", getattr(args, "strategy", None)),
                                ("n_positives", getattr(args, "np", None)),
                                ("n_negatives", getattr(args, "nn", None))) if v is not None}
    if mining:
        cfg = replace(cfg, mining=replace(cfg.mining, **mining))
    training = {k: v for k, v in (("margin", getattr(args, "margin", None)),
                                  ("learning_rate", getattr(args, "lr", None)),
                                  ("batch_triplets", getattr(args, "batch", None)),
                                  ("patience", getattr(args, "patience", None)),
                                  ("max_epochs", getattr(args, "max_epochs", None))) if v is not None}
    if training:
        cfg = replace(cfg, training=replace(cfg.training, **training),
                      tagger_training=replace(cfg.tagger_training, **training))
    ev = {k: v for k, v in (("k", getattr(args, "k", None)),
                            ("n_relevant", getattr(args, "relevant", None))) if v is not None}
    if ev:
        gains = None if "n_relevant" in ev else cfg.eval.gains
        cfg = replace(cfg, eval=replace(cfg.eval, gains=gains, **ev))
    return cfg


def cmd_generate(exp, args):
    exp.generate(force=args.force)
    corpus, split = exp.load_corpus()
    print(f"corpus: {len(corpus.tracks)} tracks, {corpus.config.n_tags} tags -> {exp.path('corpus')}")
    print(f"split: train {len(split.train)}, validation {len(split.validation)}, test {len(split.test)}")


def cmd_rank(exp, args):
    exp.rank(force=args.force)
    print(f"rankings -> {exp.path('rankings')}")


def cmd_profile(exp, args):
    from .plotting import plot_similarity_profile

    exp.profile(force=args.force)
    prof = read_profile(exp.path("profile", "similarity_profile.csv"))
    plot_similarity_profile(prof, exp.path("profile", "similarity_profile.png"))
    below = int((prof < 0.5).sum())
    print(f"similarity profile -> {exp.path('profile')} ({below}/{len(prof)} ranks below 50%)")


def cmd_mine(exp, args):
    strategy = exp.config.mining.strategy
    exp.mine(strategy, force=args.force)
    n = sum(1 for _ in open(exp.path("mining", strategy, "train.csv"))) - 1
    print(f"mined {n} training triplets ({strategy}) -> {exp.path('mining', strategy)}")


def cmd_train(exp, args):
    system = parse_system(_train_system(args))
    exp.train(system, force=args.force)
    report = fmt.read_json(exp.path("models", system.key, "train_report.json"))
    print(f"{system.label}: best epoch {report['best_epoch']} of {report['stopped_epoch']}, "
          f"val loss {min(report['val_loss']):.4f} -> {exp.path('models', system.key)}")


def cmd_embed(exp, args):
    system = parse_system(args.system)
    if system.mode != "embed":
        raise SystemExit(f"{args.system} is a tagger; use estimate-tags")
    exp.embed(system, force=args.force)
    print(f"embeddings -> {exp.path('outputs', system.key, 'vectors.json')}")


def cmd_estimate(exp, args):
    system = parse_system(args.system)
    if system.mode != "tag":
        raise SystemExit(f"{args.system} is an embedder; use embed")
    exp.embed(system, force=args.force)
    print(f"tag estimates -> {exp.path('outputs', system.key, 'vectors.json')}")


def cmd_evaluate(exp, args):
    system = parse_system(args.system)
    exp.evaluate(system, force=args.force)
    m = fmt.read_json(exp.path("eval", system.key, "metrics.json"))
    k = exp.config.eval.k
    for name, v in m["summary"].items():
        print(f"{name}@{k}\t{v['mean']:.2f}\t± {v['ci95']:.2f}")
    if "mean_auc" in m:
        print(f"mean AUC\t{m['mean_auc']:.4f}")


def cmd_report(exp, args):
    exp.report(force=args.force)
    print(exp.path("report", "table.txt").read_text(), end="")


def cmd_run(exp, args):
    from .pipeline import run_experiment

    run_experiment(exp.config, exp.root)
    print(exp.path("report", "table.txt").read_text(), end="")
    print(f"report -> {exp.path('report')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tripletrank", description=__doc__)
    parser.add_argument("--config", help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, help="global seed; overrides the config")
    parser.add_argument("--out", help="output directory; overrides the config")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
        p.set_defaults(func=func)
        return p

    add("generate", cmd_generate, "generate the synthetic corpus and split")
    add("rank", cmd_rank, "ground-truth rankings for each split")
    add("profile-similarity", cmd_profile, "mean similarity against rank (plot data and figure)")
    p = add("mine", cmd_mine, "mine training and validation triplets")
    p.add_argument("--strategy", choices=["neighbors", "uniform", "distance"])
    p.add_argument("--np", type=int, help="positives per anchor")
    p.add_argument("--nn", type=int, help="negatives per anchor-positive pair")
    p = add("train", cmd_train, "train one system")
    p.add_argument("--system", help="at, tl-<strategy>, tl-autopool[-<strategy>]")
    p.add_argument("--mode", choices=["triplet", "tagger"], default="triplet")
    p.add_argument("--pool", choices=["max", "autopool"], default="max")
    p.add_argument("--strategy", choices=["neighbors", "uniform", "distance"])
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    for name, func, help in (("embed", cmd_embed, "embed the test tracks"),
                             ("estimate-tags", cmd_estimate, "estimate test-track tag likelihoods")):
        p = add(name, func, help)
        p.add_argument("--system", required=True)
    p = add("evaluate", cmd_evaluate, "score one system on the test set")
    p.add_argument("--system", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--relevant", type=int)
    add("report", cmd_report, "table, delimited data and figures for all systems")
    add("run", cmd_run, "run every stage of the experiment")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("ignore", RuntimeWarning)
    try:
        cfg = _apply_overrides(_config(args), args)
        exp = Experiment(cfg)
        args.func(exp, args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
