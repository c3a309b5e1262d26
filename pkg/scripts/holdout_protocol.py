"""Unseen-category protocol: hold out N training categories, train on the rest, score the held-out ones.

    python scripts/holdout_protocol.py --config configs/desk.yaml --n 10 --out runs/holdout
    python scripts/holdout_protocol.py --synthetic --n 10 --out runs/holdout_synthetic

``--synthetic`` generates a 12-category corpus and benchmark under ``--out``
and trains on it with the desk-scale schedule, for machines without the real
data. The protocol runs twice when ``--repeat`` is given and checks that both
runs report identical per-category PCK.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from photosketch.config import load_config
from photosketch.pipeline import build_benchmark, holdout_protocol
from photosketch.synthetic import write_corpus, write_synthetic_benchmark

ROOT = Path(__file__).resolve().parents[1]


def synthetic_data(root, categories: int = 12, photos: int = 2, seed: int = 0) -> tuple[Path, Path]:
    root = Path(root)
    corpus = root / "corpus"
    bench = root / "benchmark.csv"
    if not bench.exists():
        write_corpus(corpus, categories, photos, 1, "train", seed)
        info = write_synthetic_benchmark(corpus, categories, 1, 1, seed + 1)
        build_benchmark(info["raw"], bench)
    return corpus, bench


def run(config_path, out, n: int, seed: int = 0, overrides=(), synthetic: bool = False, repeat: bool = False):
    out = Path(out)
    overrides = list(overrides)
    if synthetic:
        corpus, bench = synthetic_data(out / "data", categories=n + 2)
        overrides += [f"data.corpus_root={corpus}", f"data.benchmark={bench}", "data.categories=null"]
    cfg = load_config(config_path, overrides)
    first = holdout_protocol(cfg, out / "run1", cfg.data.benchmark, n, seed)
    if repeat:
        second = holdout_protocol(cfg, out / "run2", cfg.data.benchmark, n, seed)
        first["deterministic"] = first == {k: v for k, v in second.items()}
    (out / "holdout_summary.json").write_text(json.dumps(first, indent=2))
    return first


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--repeat", action="store_true")
    p.add_argument("--out", default=str(ROOT / "runs" / "holdout"))
    args = p.parse_args(argv)
    print(json.dumps(run(args.config, args.out, args.n, args.seed, args.set, args.synthetic, args.repeat),
                     indent=2))


if __name__ == "__main__":
    main()
