"""Command implementations shared by the CLI and the experiment scripts."""
from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import to_tensor
from .benchmark import aggregate_annotations, propose_keypoints
from .dataset import IMAGE_EXTS, Benchmark, load_benchmark, load_image, read_raw_annotations, write_benchmark
from .encoder import encode
from .evaluation import (EvalConfig, PredictionSet, consistency_matrix, pck_table,
                         transfer_keypoints, write_matrix, write_results)
from .warpcore import resize_flow

log = logging.getLogger(__name__)


def find_image(directory: Path, stem: str) -> Path:
    for ext in IMAGE_EXTS:
        for cand in (directory / f"{stem}{ext}", directory / f"{stem}{ext.upper()}"):
            if cand.is_file():
                return cand
    raise FileNotFoundError(f"no image named {stem} under {directory}")


def pair_images(corpus_root, pair, split: str = "test") -> tuple[np.ndarray, np.ndarray]:
    base = Path(corpus_root) / split
    photo = load_image(find_image(base / "photo" / pair.category, pair.photo_id))
    sketch = load_image(find_image(base / "sketch" / pair.category, pair.sketch_id))
    return photo, sketch


@torch.no_grad()
def model_flows(encoder, estimator, photos: torch.Tensor, sketches: torch.Tensor, side: int):
    """Full-resolution photo->sketch fields (on the sketch grid) for a batch."""
    stages = estimator.config.stages
    from .warpcore import concat_pyramid
    pp = encode(encoder, photos, "photo", stages)
    ps = encode(encoder, sketches, "sketch", stages)
    coarse = estimator(concat_pyramid(pp.select(stages)), concat_pyramid(ps.select(stages)))
    return resize_flow(coarse, (side, side)), pp, ps


def predict_benchmark(encoder, estimator, benchmark: Benchmark, corpus_root, system_id: str = "model",
                      batch_size: int = 16, split: str = "test", image_side: int = 256) -> PredictionSet:
    encoder.eval()
    estimator.eval()
    preds = {}
    pairs = list(benchmark)
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        imgs = [pair_images(corpus_root, p, split) for p in chunk]
        photos = torch.stack([to_tensor(a) for a, _ in imgs])
        sketches = torch.stack([to_tensor(b) for _, b in imgs])
        flows, _, _ = model_flows(encoder, estimator, photos, sketches, image_side)
        for p, f in zip(chunk, flows):
            preds[p.pair_id] = transfer_keypoints(p.sketch_keypoints, f, image_side)
    return PredictionSet(system_id, preds)


def identity_stub_predictions(benchmark: Benchmark, image_side: int = 256) -> PredictionSet:
    """The identity model pushed through the same transfer path as a trained model."""
    zero = torch.zeros(image_side, image_side, 2, dtype=torch.float64)
    return PredictionSet("identity", {p.pair_id: transfer_keypoints(p.sketch_keypoints, zero, image_side)
                                      for p in benchmark})


def evaluate(benchmark_path, out_dir, checkpoint=None, predictions=None, corpus_root=None,
             config: Optional[EvalConfig] = None, categories: Optional[Sequence[str]] = None,
             raw_path=None) -> dict:
    """Score a checkpoint, an external prediction file, or (neither given) the identity stub.

    Writes ``results.jsonl`` and ``predictions.csv`` under ``out_dir`` and
    returns the PCK table.
    """
    config = config or EvalConfig()
    benchmark = load_benchmark(benchmark_path, raw_path)
    if categories:
        benchmark = benchmark.restrict(categories)
    if predictions is not None:
        pset = PredictionSet.read(predictions)
    elif checkpoint is not None:
        from .training import load_model
        if corpus_root is None:
            raise ValueError("evaluating a checkpoint needs the corpus root for the benchmark images")
        enc, est, _ = load_model(checkpoint)
        pset = predict_benchmark(enc, est, benchmark, corpus_root, Path(checkpoint).stem,
                                 image_side=config.image_side)
    else:
        pset = identity_stub_predictions(benchmark, config.image_side)
    table = pck_table(pset, benchmark, config)
    out = Path(out_dir)
    write_results(out / "results.jsonl", table)
    pset.write(out / "predictions.csv")
    return table


def build_benchmark(raw_path, out_path, n_sigma: float = 3.0, report_path=None) -> dict:
    """Aggregate raw annotations into the benchmark file; returns the rejection summary."""
    records, bad = read_raw_annotations(raw_path)
    pairs, report = aggregate_annotations(records, n_sigma)
    write_benchmark(out_path, pairs)
    summary = {
        "n_records": report.n_records,
        "n_rejected": len(report.rejections),
        "rejection_rate": report.rejection_rate,
        "threshold": report.threshold,
        "n_pairs": len(pairs),
        "malformed_pairs": sorted(bad),
        "rejections": [{"record_id": r.record_id, "distance": r.distance, "threshold": r.threshold}
                       for r in report.rejections],
    }
    if report_path is not None:
        Path(report_path).write_text(json.dumps(summary, indent=2))
    return summary


def propose_for_sketches(sketch_dir, out_path, seed: int = 0) -> int:
    """Keypoint proposals for every sketch image under ``sketch_dir/<category>/``."""
    from .benchmark import SegmentationError
    n = 0
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "keypoint_index", "sketch_x", "sketch_y"])
        for path in sorted(Path(sketch_dir).glob("*/*")):
            if path.suffix.lower() not in IMAGE_EXTS:
                continue
            try:
                kps = propose_keypoints(load_image(path), seed)
            except SegmentationError as exc:
                log.warning("%s: %s", path, exc)
                continue
            pid = f"{path.parent.name}/{path.stem}"
            for i, (x, y) in enumerate(kps):
                w.writerow([pid, i, repr(float(x)), repr(float(y))])
            n += 1
    return n


def consistency(prediction_files: Sequence, out_path, image_side: int = 256):
    systems = [PredictionSet.read(p) for p in prediction_files]
    labels, matrix = consistency_matrix(systems, image_side)
    write_matrix(out_path, labels, matrix)
    return labels, matrix


def visualize(checkpoint, benchmark_path, corpus_root, out_dir, pair_ids: Optional[Sequence[str]] = None,
              limit: int = 4) -> list[dict]:
    from .training import load_model
    from .visualize import export_visuals
    from .losses import weight_map
    from .warpcore import normalized_affinity_stack
    enc, est, ckpt = load_model(checkpoint)
    benchmark = load_benchmark(benchmark_path)
    pairs = [benchmark[p] for p in pair_ids] if pair_ids else list(benchmark)[:limit]
    written = []
    for p in pairs:
        photo, sketch = (to_tensor(a).unsqueeze(0) for a in pair_images(corpus_root, p))
        flows, pp, ps = model_flows(enc, est, photo, sketch, photo.shape[-1])
        pred = transfer_keypoints(p.sketch_keypoints, flows[0])
        with torch.no_grad():
            stack = normalized_affinity_stack(pp.select(est.config.stages), ps.select(est.config.stages))
            w = weight_map(stack.mean(1), 0.001).numpy()[0]
        side = int(round(w.shape[0] ** 0.5))
        written.append(export_visuals(out_dir, p.pair_id, photo[0], sketch[0], flows[0],
                                      {"photo": pp, "sketch": ps}, p.sketch_keypoints, pred,
                                      p.photo_keypoints_gt, {"match": w.reshape(side, side)}))
    return written


def train_and_evaluate(config, out_dir, benchmark_path, categories: Optional[Sequence[str]] = None,
                       corpus_root=None) -> dict:
    """Both training phases under ``out_dir`` followed by evaluation on the benchmark."""
    from .training import RunRecord, pretrain_encoder, train_estimator
    out = Path(out_dir)
    enc_run = RunRecord(out / "encoder", config)
    pretrain_encoder(config, enc_run)
    est_run = RunRecord(out / "estimator", config)
    train_estimator(config, est_run, encoder_checkpoint=enc_run.root / "checkpoints" / "encoder-latest.pt")
    return evaluate(benchmark_path, out / "eval", checkpoint=est_run.root / "checkpoints" / "estimator-latest.pt",
                    corpus_root=corpus_root or config.data.corpus_root, config=config.eval, categories=categories)


def holdout_protocol(config, out_dir, benchmark_path, n: int, seed: int = 0) -> dict:
    """Hold out ``n`` training categories, train on the rest, report PCK on the held-out ones."""
    import dataclasses
    from .dataset import load_corpus
    from .evaluation import holdout_split
    cats = load_corpus(config.data.corpus_root, "train", config.data.exclude).categories
    train, held = holdout_split(cats, n, seed)
    config = dataclasses.replace(config, data=dataclasses.replace(config.data, holdout_n=n, holdout_seed=seed,
                                                                  categories=None))
    table = train_and_evaluate(config, out_dir, benchmark_path, categories=held)
    summary = {"n": n, "seed": seed, "train": train, "held_out": held, "pck": table["per_category"],
               "overall": table["overall"]}
    Path(out_dir, "holdout.json").write_text(json.dumps(summary, indent=2))
    return summary
