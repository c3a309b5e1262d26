"""Keypoint transfer, PCK, inter-system consistency and the unseen-category split."""
from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import IMAGE_SIDE, NUM_KEYPOINTS, Benchmark
from .warpcore import sample_field_at


@dataclass
class EvalConfig:
    alphas: tuple[float, ...] = (0.05, 0.10)
    image_side: int = IMAGE_SIDE

    def validate(self):
        for a in self.alphas:
            if not 0 < a < 1:
                raise ValueError(f"alpha must lie in (0, 1), got {a}")


@dataclass
class PredictionSet:
    system_id: str
    predictions: dict[str, np.ndarray] = field(default_factory=dict)  # pair_id -> (8, 2)

    def __post_init__(self):
        for pid, p in self.predictions.items():
            p = np.asarray(p, dtype=np.float64)
            if p.shape != (NUM_KEYPOINTS, 2) or not np.all(np.isfinite(p)):
                raise ValueError(f"prediction for {pid} must be a finite ({NUM_KEYPOINTS}, 2) array")
            self.predictions[pid] = p

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "keypoint_index", "x", "y"])
            for pid in sorted(self.predictions):
                for i, (x, y) in enumerate(self.predictions[pid]):
                    w.writerow([pid, i, repr(float(x)), repr(float(y))])

    @classmethod
    def read(cls, path, system_id: str | None = None) -> "PredictionSet":
        rows: dict[str, dict[int, tuple[float, float]]] = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.setdefault(row["pair_id"], {})[int(row["keypoint_index"])] = (float(row["x"]), float(row["y"]))
        preds = {}
        for pid, kps in rows.items():
            if sorted(kps) != list(range(NUM_KEYPOINTS)):
                raise ValueError(f"{path}: pair {pid} has keypoints {sorted(kps)}")
            preds[pid] = np.array([kps[i] for i in range(NUM_KEYPOINTS)])
        return cls(system_id or Path(path).stem, preds)


def transfer_keypoints(sketch_keypoints, flow_photo_to_sketch, image_side: int = IMAGE_SIDE) -> np.ndarray:
    """Photo locations of sketch keypoints: ``p + F(p)``, F sampled bilinearly, clamped to the frame.

    ``flow_photo_to_sketch`` is the full-resolution field on the sketch grid that
    warps the photo onto the sketch.
    """
    flow = torch.as_tensor(flow_photo_to_sketch).detach().double()
    pts = torch.as_tensor(np.asarray(sketch_keypoints, dtype=np.float64))
    pred = pts + sample_field_at(flow, pts)
    return pred.clamp(0, image_side - 1).detach().cpu().double().numpy()


def _check_coverage(predictions: PredictionSet, benchmark: Benchmark):
    missing = [pid for pid in sorted(benchmark.pairs) if pid not in predictions.predictions]
    if missing:
        head = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise KeyError(f"{predictions.system_id}: missing predictions for {len(missing)} pairs: {head}")


def keypoint_errors(predictions: PredictionSet, benchmark: Benchmark) -> dict[str, np.ndarray]:
    _check_coverage(predictions, benchmark)
    return {pid: np.linalg.norm(predictions.predictions[pid] - benchmark[pid].photo_keypoints_gt, axis=1)
            for pid in sorted(benchmark.pairs)}


def pck(predictions: PredictionSet, benchmark: Benchmark, alpha: float, image_side: int = IMAGE_SIDE) -> float:
    """Percentage of keypoints within ``alpha * image_side`` pixels of the ground truth."""
    errs = keypoint_errors(predictions, benchmark)
    if not errs:
        return float("nan")
    allerr = np.concatenate([errs[k] for k in sorted(errs)])
    return 100.0 * float(np.mean(allerr <= alpha * image_side))


def pck_table(predictions: PredictionSet, benchmark: Benchmark, config: EvalConfig | None = None) -> dict:
    """Overall and per-category PCK for every alpha."""
    config = config or EvalConfig()
    errs = keypoint_errors(predictions, benchmark)
    by_cat: dict[str, list[np.ndarray]] = {}
    for pid, e in errs.items():
        by_cat.setdefault(benchmark[pid].category, []).append(e)
    out = {"system_id": predictions.system_id, "n_pairs": len(errs), "overall": {}, "per_category": {}}
    allerr = np.concatenate([errs[k] for k in sorted(errs)]) if errs else np.zeros(0)
    for a in config.alphas:
        thr = a * config.image_side
        out["overall"][f"{a:g}"] = 100.0 * float(np.mean(allerr <= thr))
        for cat in sorted(by_cat):
            e = np.concatenate(by_cat[cat])
            out["per_category"].setdefault(cat, {})[f"{a:g}"] = 100.0 * float(np.mean(e <= thr))
    return out


def write_results(path, table: dict) -> None:
    """One JSON object per line: the overall row first, then one per category."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"system_id": table["system_id"], "scope": "overall", "n_pairs": table["n_pairs"],
                             "pck": table["overall"]}) + "\n")
        for cat, vals in table["per_category"].items():
            fh.write(json.dumps({"system_id": table["system_id"], "scope": cat, "pck": vals}) + "\n")


def consistency_matrix(systems: Sequence[PredictionSet], image_side: int = IMAGE_SIDE):
    """Mean normalised distance between the predictions of every pair of systems.

    Returns ``(labels, matrix)``.
    """
    if not systems:
        return [], np.zeros((0, 0))
    pids = sorted(systems[0].predictions)
    for s in systems[1:]:
        if sorted(s.predictions) != pids:
            raise ValueError(f"system {s.system_id} covers different pairs than {systems[0].system_id}")
    stacked = [np.stack([s.predictions[p] for p in pids]) for s in systems]
    n = len(systems)
    m = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            d = np.linalg.norm(stacked[a] - stacked[b], axis=-1).mean() / image_side
            m[a, b] = m[b, a] = d
    return [s.system_id for s in systems], m


def write_matrix(path, labels: Sequence[str], matrix: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["system", *labels])
        for lab, row in zip(labels, matrix):
            w.writerow([lab, *[repr(float(v)) for v in row]])


def holdout_split(categories: Iterable[str], n: int, seed: int) -> tuple[list[str], list[str]]:
    """Deterministically hold out ``n`` categories; returns (train, held_out), both sorted."""
    cats = sorted(set(categories))
    if not 0 <= n < len(cats):
        raise ValueError(f"cannot hold out {n} of {len(cats)} categories")
    held = sorted(random.Random(seed).sample(cats, n))
    return [c for c in cats if c not in held], held


def identity_predictions(benchmark: Benchmark, system_id: str = "identity") -> PredictionSet:
    """Baseline that predicts each sketch keypoint's own coordinates."""
    return PredictionSet(system_id, {p.pair_id: p.sketch_keypoints.copy() for p in benchmark})
