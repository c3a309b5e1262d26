"""Train the estimator on images paired with their own TPS warps and measure endpoint error.

    python scripts/synthetic_warp_recovery.py --out artifacts/synthetic_recovery

Trains on 200 procedurally generated scenes (seed 0). Evaluation uses fresh
warps of the training images and, separately, 50 unseen scenes. Writes
``metrics.json``, the estimator checkpoint and the training log under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np
import torch

from photosketch.config import RunConfig, from_dict, load_config
from photosketch.synthetic import scene_tensor
from photosketch.training import (RunRecord, load_checkpoint, load_model, synthetic_endpoint_error,
                                  train_estimator)

ROOT = Path(__file__).resolve().parents[1]


def evaluate_checkpoint(path, n_train: int = 200, seed: int = 0) -> dict:
    enc, est, ckpt = load_model(path)
    cfg = from_dict(RunConfig, ckpt["config"])
    epe, zero = synthetic_endpoint_error(enc, est, scene_tensor(n_train, seed), cfg.augment, seed + 1)
    epe_unseen, zero_unseen = synthetic_endpoint_error(enc, est, scene_tensor(50, seed + 1000), cfg.augment,
                                                       seed + 2)
    return {"epe_train_images_fresh_warps": epe, "epe_zero_field_train_images": zero,
            "epe_unseen_images": epe_unseen, "epe_zero_field_unseen_images": zero_unseen, "step": ckpt["step"]}


def run(config_path, out, n_images: int = 200, overrides=()) -> dict:
    cfg = load_config(config_path, list(overrides))
    out = Path(out)
    if (out / "run" / "log.jsonl").exists():
        raise FileExistsError(f"{out / 'run'} already holds a training run; choose another --out or remove it")
    record = RunRecord(out / "run", cfg)
    t0 = time.time()
    train_estimator(cfg, record, synthetic_images=scene_tensor(n_images, cfg.seed))
    final = sorted((out / "run" / "checkpoints").glob("estimator-epoch*.pt"))[-1]
    ckpt = load_checkpoint(final, "estimator")
    ckpt.pop("optimizer", None)  # the exported model only needs the weights
    torch.save(ckpt, out / "estimator.pt")
    metrics = evaluate_checkpoint(out / "estimator.pt", n_images, cfg.seed)
    metrics["train_seconds"] = time.time() - t0
    epes = [e["epe"] for e in record.read_log() if "epe" in e]
    k = max(1, len(epes) // 20)
    metrics["train_epe_first_window"] = float(np.mean(epes[:k]))
    metrics["train_epe_last_window"] = float(np.mean(epes[-k:]))
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default=str(ROOT / "configs" / "synthetic_recovery.yaml"))
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=str(ROOT / "artifacts" / "synthetic_recovery"))
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--evaluate-only", action="store_true", help="re-score an existing <out>/estimator.pt")
    args = p.parse_args(argv)
    if args.evaluate_only:
        metrics = evaluate_checkpoint(Path(args.out) / "estimator.pt", args.images)
    else:
        metrics = run(args.config, args.out, args.images, args.set)
    print(json.dumps(metrics, indent=2))


if __name__ == "__main__":
    main()
