"""Compute the identity-mapping PCK of a benchmark once and pin it as a regression constant.

    python scripts/pin_identity_baseline.py --benchmark data/psc6k/benchmark.csv --name psc6k
    python scripts/pin_identity_baseline.py --synthetic

The computation reads the aggregated CSV with the ``csv`` module and counts in
plain Python, independently of the package's evaluation code. Constants are
written to ``tests/pinned_baselines.json``; the acceptance suite then requires
``photosketch evaluate`` on the identity stub to reproduce them bit-exactly.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import tempfile
from collections import defaultdict
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
PINNED = ROOT / "tests" / "pinned_baselines.json"
ALPHAS = (0.05, 0.1)
IMAGE_SIDE = 256
SYNTHETIC_PROXY = {"categories": 3, "photos_per_category": 2, "sketches_per_photo": 2, "seed": 11}


def identity_pck(benchmark_csv) -> dict:
    """PCK (percent) of predicting every sketch keypoint's own coordinate."""
    errors = defaultdict(list)
    with open(benchmark_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            dx = float(row["sketch_x"]) - float(row["gt_x"])
            dy = float(row["sketch_y"]) - float(row["gt_y"])
            errors[row["pair_id"]].append(math.hypot(dx, dy))
    flat = [e for pid in sorted(errors) for e in errors[pid]]
    return {f"{a:g}": 100.0 * (sum(1 for e in flat if e <= a * IMAGE_SIDE) / len(flat)) for a in ALPHAS}


def build_synthetic_proxy(root) -> Path:
    from photosketch.pipeline import build_benchmark
    from photosketch.synthetic import write_synthetic_benchmark
    info = write_synthetic_benchmark(Path(root) / "corpus", **SYNTHETIC_PROXY)
    out = Path(root) / "benchmark.csv"
    build_benchmark(info["raw"], out)
    return out


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def pin(name: str, benchmark_csv, extra: dict | None = None) -> dict:
    pinned = json.loads(PINNED.read_text()) if PINNED.exists() else {}
    entry = {"pck": identity_pck(benchmark_csv), "benchmark_sha256": sha256(benchmark_csv), **(extra or {})}
    pinned[name] = entry
    PINNED.write_text(json.dumps(pinned, indent=2, sort_keys=True) + "\n")
    return entry


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--benchmark", help="aggregated benchmark CSV to pin")
    p.add_argument("--name", default="psc6k")
    p.add_argument("--synthetic", action="store_true", help="pin the generated synthetic proxy benchmark")
    args = p.parse_args(argv)
    if args.synthetic:
        with tempfile.TemporaryDirectory() as tmp:
            entry = pin("synthetic_proxy", build_synthetic_proxy(tmp), {"params": SYNTHETIC_PROXY})
    elif args.benchmark:
        entry = pin(args.name, args.benchmark)
    else:
        p.error("give --benchmark or --synthetic")
    print(json.dumps(entry, indent=2))


if __name__ == "__main__":
    main()
