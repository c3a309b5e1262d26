"""Procedural images and photo/sketch corpora for desk-scale runs and tests.

Scenes are random overlapping shapes on a smooth colour gradient. A synthetic
"photo" is a textured object silhouette on a plain background; its "sketch" is
the silhouette outline plus interior part lines, rendered as dark strokes on
white and distorted by a known TPS, so exact sketch->photo correspondences exist.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .augment import AugmentConfig, spatial_field

SIDE = 256


def _color(rng):
    return tuple(int(v) for v in rng.integers(0, 256, size=3))


def random_scene(rng: np.random.Generator, side: int = SIDE, n_shapes: int = 40) -> np.ndarray:
    """Textured RGB scene (side, side, 3) in [0, 1]."""
    yy, xx = np.mgrid[0:side, 0:side] / side
    c0, c1, c2 = rng.random(3), rng.random(3), rng.random(3)
    base = c0 + (c1 - c0) * xx[..., None] + (c2 - c0) * yy[..., None] * 0.5
    img = Image.fromarray((np.clip(base, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(img)
    for _ in range(n_shapes):
        kind = rng.integers(3)
        cx, cy = rng.uniform(-0.1, 1.1, size=2) * side
        r = rng.uniform(0.03, 0.2) * side
        if kind == 0:
            draw.ellipse([cx - r, cy - r * rng.uniform(0.4, 1.0), cx + r, cy + r], fill=_color(rng))
        elif kind == 1:
            k = rng.integers(3, 7)
            ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
            pts = [(cx + r * math.cos(a), cy + r * math.sin(a)) for a in ang]
            draw.polygon(pts, fill=_color(rng))
        else:
            x2, y2 = rng.uniform(0, 1, size=2) * side
            draw.line([cx, cy, x2, y2], fill=_color(rng), width=int(rng.integers(2, 8)))
    img = img.filter(ImageFilter.GaussianBlur(0.8))
    return np.asarray(img, dtype=np.float32) / 255.0


def random_blob(rng: np.random.Generator, side: int = SIDE, n: int = 9) -> list[tuple[float, float]]:
    """Star-shaped closed polygon covering roughly the central half of the frame."""
    k = 64
    ang = np.linspace(0, 2 * np.pi, k, endpoint=False)
    radius = np.full(k, 0.3)
    for f in range(1, 4):
        radius += rng.uniform(-0.06, 0.06) / f * np.cos(f * ang + rng.uniform(0, 2 * np.pi))
    cx, cy = side / 2 + rng.uniform(-0.05, 0.05, size=2) * side
    sx, sy = rng.uniform(0.8, 1.2, size=2)
    return [(cx + sx * r * side * math.cos(a), cy + sy * r * side * math.sin(a)) for r, a in zip(radius, ang)]


def render_photo(rng, outline, side: int = SIDE) -> np.ndarray:
    bg = tuple(int(v) for v in rng.integers(170, 256, size=3))
    img = Image.new("RGB", (side, side), bg)
    draw = ImageDraw.Draw(img)
    draw.polygon(outline, fill=_color(rng))
    # coloured parts inside the silhouette make the interior matchable
    mask = Image.new("L", (side, side), 0)
    ImageDraw.Draw(mask).polygon(outline, fill=255)
    texture = Image.fromarray((random_scene(rng, side, n_shapes=25) * 255).astype(np.uint8))
    img.paste(texture, (0, 0), mask.filter(ImageFilter.MinFilter(9)))
    return np.asarray(img.filter(ImageFilter.GaussianBlur(0.6)), dtype=np.float32) / 255.0


def render_outline(outline, side: int = SIDE, width: int = 3, inner: list | None = None) -> np.ndarray:
    img = Image.new("L", (side, side), 255)
    draw = ImageDraw.Draw(img)
    draw.line(list(outline) + [outline[0]], fill=0, width=width, joint="curve")
    for seg in inner or []:
        draw.line(seg, fill=0, width=max(1, width - 1))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.repeat(arr[..., None], 3, axis=2)


def _inner_lines(rng, outline):
    pts = np.asarray(outline)
    k = len(pts)
    lines = []
    for _ in range(2):
        i, j = rng.integers(0, k, size=2)
        if abs(int(i) - int(j)) > k // 6:
            a, b = pts[i], pts[j]
            lines.append([tuple(a + 0.15 * (b - a)), tuple(a + 0.85 * (b - a))])
    return lines


def sketch_distortion(rng, side: int = SIDE, magnitude: float = 0.06) -> np.ndarray:
    """Sampling offsets (H, W, 2) from sketch pixels into the photo frame."""
    cfg = AugmentConfig(rotation_deg=6.0, scale=(0.92, 1.08), translation=0.05, tps_magnitude=magnitude)
    rot = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    scale = rng.uniform(*cfg.scale)
    t = rng.uniform(-cfg.translation, cfg.translation, size=2) * side
    disp = rng.uniform(-cfg.tps_magnitude, cfg.tps_magnitude, size=(9, 2)) * 2
    return spatial_field(side, rot, scale, t, disp, 3)


def make_pair(rng, side: int = SIDE, n_sketches: int = 5):
    """One synthetic photo, ``n_sketches`` sketches and their sketch->photo fields."""
    from .warpcore import warp
    import torch

    outline = random_blob(rng, side)
    photo = render_photo(rng, outline, side)
    inner = _inner_lines(rng, outline)
    drawing = render_outline(outline, side, inner=inner)
    sketches, fields = [], []
    for _ in range(n_sketches):
        field = sketch_distortion(rng, side)
        img = torch.from_numpy(drawing).permute(2, 0, 1)
        warped = warp(img, torch.from_numpy(field.astype(np.float32))).permute(1, 2, 0).numpy()
        # re-darken strokes softened by interpolation
        warped = np.where(warped < 0.75, 0.0, 1.0).astype(np.float32)
        sketches.append(warped)
        fields.append(field.astype(np.float32))
    return photo, sketches, fields


def _save(arr: np.ndarray, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8)).save(path)


def write_corpus(root, categories: int = 2, photos_per_category: int = 2, sketches_per_photo: int = 5,
                 split: str = "train", seed: int = 0, side: int = SIDE, save_fields: bool = False) -> dict:
    """Write a corpus in the on-disk layout read by :func:`photosketch.dataset.load_corpus`.

    Returns ``{sketch_id: (category, photo_id, field)}`` where ``field`` maps
    sketch pixels to photo pixels (sampling convention).
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    truth = {}
    for c in range(categories):
        cat = f"cat{c:03d}"
        for p in range(photos_per_category):
            photo_id = f"{cat}_p{p:03d}"
            photo, sketches, fields = make_pair(rng, side, sketches_per_photo)
            _save(photo, root / split / "photo" / cat / f"{photo_id}.png")
            for k, (sk, fl) in enumerate(zip(sketches, fields), start=1):
                sketch_id = f"{photo_id}-{k}"
                _save(sk, root / split / "sketch" / cat / f"{sketch_id}.png")
                truth[sketch_id] = (cat, photo_id, fl)
                if save_fields:
                    path = root / split / "fields" / cat / f"{sketch_id}.npy"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    np.save(path, fl)
    return truth


def write_benchmark_annotations(path, truth: dict, keypoints: dict, seed: int = 0, noise_px: float = 3.0,
                                outlier_rate: float = 0.005, n_annotators: int = 3, side: int = SIDE):
    """Simulated raw annotations: true photo keypoint + Gaussian noise, rare far outliers.

    ``keypoints`` maps pair_id ("category/sketch_id") to (8, 2) sketch keypoints.
    """
    from .dataset import write_raw_annotations, AnnotationRecord
    import torch
    from .warpcore import sample_field_at

    rng = np.random.default_rng(seed)
    records = []
    for pair_id, kps in sorted(keypoints.items()):
        sketch_id = pair_id.split("/", 1)[1]
        _, _, field = truth[sketch_id]
        kp = torch.as_tensor(np.asarray(kps, dtype=np.float32))
        true = (kp + sample_field_at(torch.from_numpy(field), kp)).numpy()
        for i, (sk, tp) in enumerate(zip(kps, true)):
            for a in range(n_annotators):
                xy = tp + rng.normal(0, noise_px, size=2)
                if rng.random() < outlier_rate:
                    xy = rng.uniform(0, side - 1, size=2)
                xy = np.clip(xy, 0, side - 1)
                records.append(AnnotationRecord(pair_id, i, (float(sk[0]), float(sk[1])),
                                                (float(xy[0]), float(xy[1])), f"ann{(a + i) % 7}"))
    write_raw_annotations(path, records)
    return records


def write_synthetic_benchmark(root, categories: int = 2, photos_per_category: int = 2, sketches_per_photo: int = 2,
                              seed: int = 0, split: str = "test", noise_px: float = 3.0,
                              outlier_rate: float = 0.005, side: int = SIDE) -> dict:
    """Test-split corpus plus proposed sketch keypoints and simulated raw annotations.

    Writes ``<root>/<split>/...`` and ``<root>/raw_annotations.csv``; returns
    the paths together with the true fields and the proposed keypoints.
    """
    from .benchmark import propose_keypoints

    root = Path(root)
    truth = write_corpus(root, categories, photos_per_category, sketches_per_photo, split, seed, side)
    keypoints = {}
    for sketch_id, (cat, _, _) in sorted(truth.items()):
        sketch = np.asarray(Image.open(root / split / "sketch" / cat / f"{sketch_id}.png").convert("RGB"),
                            dtype=np.float32) / 255.0
        keypoints[f"{cat}/{sketch_id}"] = propose_keypoints(sketch, seed)
    raw = root / "raw_annotations.csv"
    write_benchmark_annotations(raw, truth, keypoints, seed, noise_px, outlier_rate, side=side)
    return {"corpus_root": root, "raw": raw, "truth": truth, "keypoints": keypoints}


def scene_tensor(n: int, seed: int, side: int = SIDE):
    """``n`` random scenes as a (n, 3, side, side) float tensor."""
    import torch

    rng = np.random.default_rng(seed)
    return torch.from_numpy(np.stack([random_scene(rng, side) for _ in range(n)])).permute(0, 3, 1, 2).contiguous()
