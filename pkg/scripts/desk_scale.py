"""Desk-scale end-to-end run: encoder, estimator and PCK against the pinned identity baseline.

    python scripts/desk_scale.py --config configs/desk.yaml --out runs/desk

Needs the photo-sketch corpus at ``data.corpus_root`` and the aggregated
benchmark at ``data.benchmark`` (both set in the config). The run passes when
PCK-10 on the configured categories beats the pinned identity PCK-10 by at
least 10 points.
"""
from __future__ import annotations

import argparse
import json
from pathlib import Path

from photosketch.config import load_config
from photosketch.pipeline import evaluate, train_and_evaluate

ROOT = Path(__file__).resolve().parents[1]
PINNED = ROOT / "tests" / "pinned_baselines.json"


def run(config_path, out, overrides=(), pinned_name: str = "psc6k") -> dict:
    cfg = load_config(config_path, list(overrides))
    for what, path in (("corpus", cfg.data.corpus_root), ("benchmark", cfg.data.benchmark)):
        if not path or not Path(path).exists():
            raise FileNotFoundError(f"{what} not found at {path!r}")
    out = Path(out)
    cats = cfg.data.categories
    table = train_and_evaluate(cfg, out, cfg.data.benchmark, categories=cats)
    identity = evaluate(cfg.data.benchmark, out / "identity", config=cfg.eval, categories=cats)["overall"]
    pinned = json.loads(PINNED.read_text()).get(pinned_name) if PINNED.exists() else None
    summary = {"model": table["overall"], "identity_on_categories": identity,
               "identity_pinned_full_benchmark": pinned["pck"] if pinned else None,
               "margin_pck10": table["overall"]["0.1"] - identity["0.1"]}
    (out / "desk_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    args = p.parse_args(argv)
    print(json.dumps(run(args.config, args.out, args.set), indent=2))


if __name__ == "__main__":
    main()
