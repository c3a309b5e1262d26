"""``photosketch`` command line: one subcommand per stage of the workflow."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import RunConfig, config_hash, load_config, to_dict


def _load(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    return cfg


def _run(cfg: RunConfig, args):
    from .training import RunRecord
    if args.run_dir:
        return RunRecord(args.run_dir, cfg)
    return RunRecord.create(cfg, args.run_id)


def _dry_run(cfg: RunConfig, phase: str) -> int:
    """Validate the configuration and build the models without touching data or disk."""
    from pathlib import Path
    from .encoder import MomentumContrast
    from .estimator import WarpEstimator
    from .training import estimator_config_for
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    plan = {
        "phase": phase,
        "config_hash": config_hash(cfg),
        "backbone": cfg.encoder.backbone_depth,
        "encoder_parameters": count(MomentumContrast(cfg.encoder).encoder_q),
        "estimator_parameters": count(WarpEstimator(estimator_config_for(cfg))),
        "epochs": cfg.schedule.encoder_epochs if phase == "encoder" else cfg.schedule.estimator_epochs,
        "batch_size": cfg.optim.batch_size,
        "run_root": str(cfg.resolved_run_root()),
        "corpus_present": bool(cfg.data.corpus_root) and Path(cfg.data.corpus_root).is_dir(),
    }
    print(json.dumps(plan))
    return 0


def cmd_pretrain_encoder(args) -> int:
    from .training import pretrain_encoder
    cfg = _load(args)
    if args.dry_run:
        return _dry_run(cfg, "encoder")
    run = _run(cfg, args)
    run.log(event="start", phase="encoder", config_hash=config_hash(cfg), momentum=cfg.encoder.momentum)
    pretrain_encoder(cfg, run, resume=args.resume, max_steps=args.max_steps, init_weights=args.init_weights)
    print(run.root)
    return 0


def cmd_train_estimator(args) -> int:
    from .training import train_estimator
    cfg = _load(args)
    if args.dry_run:
        return _dry_run(cfg, "estimator")
    run = _run(cfg, args)
    run.log(event="start", phase="estimator", config_hash=config_hash(cfg), loss=to_dict(cfg.loss))
    train_estimator(cfg, run, encoder_checkpoint=args.encoder, resume=args.resume, max_steps=args.max_steps)
    print(run.root)
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import EvalConfig
    from .pipeline import evaluate
    cfg = load_config(args.config, args.set).eval if args.config or args.set else EvalConfig()
    try:
        table = evaluate(args.benchmark, args.out, checkpoint=args.checkpoint, predictions=args.predictions,
                         corpus_root=args.corpus_root, config=cfg, categories=args.categories)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(table["overall"]))
    return 0


def cmd_build_benchmark(args) -> int:
    from .pipeline import build_benchmark, propose_for_sketches
    if args.propose_from:
        n = propose_for_sketches(args.propose_from, args.out, args.seed)
        print(f"proposed keypoints for {n} sketches")
        return 0
    if not args.raw:
        print("error: --raw is required unless --propose-from is given", file=sys.stderr)
        return 2
    summary = build_benchmark(args.raw, args.out, args.n_sigma, args.report)
    print(f"{summary['n_pairs']} pairs, rejected {summary['n_rejected']} of {summary['n_records']} records "
          f"({100 * summary['rejection_rate']:.3f}%)")
    return 0


def cmd_consistency_matrix(args) -> int:
    from .pipeline import consistency
    labels, matrix = consistency(args.predictions, args.out)
    for lab, row in zip(labels, matrix):
        print(lab, " ".join(f"{v:.4f}" for v in row))
    return 0


def cmd_visualize(args) -> int:
    from .pipeline import visualize
    written = visualize(args.checkpoint, args.benchmark, args.corpus_root, args.out, args.pairs, args.limit)
    for paths in written:
        for p in paths.values():
            print(p)
    return 0


def cmd_holdout_split(args) -> int:
    from .evaluation import holdout_split
    if args.categories_from:
        from .dataset import load_corpus
        cats = load_corpus(args.categories_from, args.split).categories
    else:
        cats = args.categories
    train, held = holdout_split(cats, args.n, args.seed)
    out = {"n": args.n, "seed": args.seed, "train": train, "held_out": held}
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh, indent=2)
    print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="photosketch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set schedule.encoder_epochs=2")

    def with_run(sp):
        sp.add_argument("--run-dir", help="explicit run directory (default: <run root>/<name>-<time>)")
        sp.add_argument("--run-id")
        sp.add_argument("--resume", help="checkpoint to resume from")
        sp.add_argument("--max-steps", type=int)
        sp.add_argument("--dry-run", action="store_true", help="validate the config, build the models and exit")

    sp = sub.add_parser("pretrain-encoder", help="phase 1: momentum-contrast encoder training")
    with_config(sp)
    with_run(sp)
    sp.add_argument("--init-weights", help="torchvision-style backbone state dict to start from")
    sp.set_defaults(func=cmd_pretrain_encoder)

    sp = sub.add_parser("train-estimator", help="phase 2: warp estimator training")
    with_config(sp)
    with_run(sp)
    sp.add_argument("--encoder", help="encoder checkpoint")
    sp.set_defaults(func=cmd_train_estimator)

    sp = sub.add_parser("evaluate", help="PCK of a checkpoint, a prediction file or the identity stub")
    with_config(sp)
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="external prediction CSV (pair_id, keypoint_index, x, y)")
    sp.add_argument("--corpus-root")
    sp.add_argument("--categories", nargs="*")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("build-benchmark", help="aggregate raw annotations or propose sketch keypoints")
    sp.add_argument("--raw", help="raw annotation CSV")
    sp.add_argument("--propose-from", help="sketch directory; writes keypoint proposals instead")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-sigma", type=float, default=3.0)
    sp.add_argument("--report")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_build_benchmark)

    sp = sub.add_parser("consistency-matrix", help="pairwise normalised distance between systems")
    sp.add_argument("predictions", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_consistency_matrix)

    sp = sub.add_parser("visualize", help="overlays, warped composites, PCA features and weight maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--benchmark", required=True)
    sp.add_argument("--corpus-root", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pairs", nargs="*")
    sp.add_argument("--limit", type=int, default=4)
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("holdout-split", help="deterministic unseen-category split")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--categories", nargs="*", default=[])
    sp.add_argument("--categories-from", help="corpus root to read categories from")
    sp.add_argument("--split", default="train")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_holdout_split)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
