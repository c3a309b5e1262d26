"""Image exports: keypoint overlays, warped composites, PCA feature maps, weight heatmaps."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image, ImageDraw

from .warpcore import warp

_PALETTE = [(230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
            (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230)]


def _to_uint8(img) -> np.ndarray:
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
        arr = arr.transpose(1, 2, 0)
    return (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)


def pca_rgb(features) -> np.ndarray:
    """Project a (C, H, W) feature map on its first 3 principal components, scaled to [0, 1]."""
    f = features.detach().cpu().double().numpy() if isinstance(features, torch.Tensor) else np.asarray(features)
    c, h, w = f.shape
    x = f.reshape(c, -1).T
    x = x - x.mean(axis=0)
    if not np.any(x):
        return np.zeros((h, w, 3))
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    proj = x @ vt[:3].T
    if proj.shape[1] < 3:
        proj = np.pad(proj, ((0, 0), (0, 3 - proj.shape[1])))
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    proj = (proj - lo) / np.where(hi > lo, hi - lo, 1.0)
    return proj.reshape(h, w, 3)


def heatmap(values, side: int | None = None) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    rgb = colormaps["viridis"](np.clip(v, 0, 1))[..., :3]
    if side is not None and rgb.shape[0] != side:
        rgb = np.asarray(Image.fromarray(_to_uint8(rgb)).resize((side, side), Image.NEAREST)) / 255.0
    return rgb


def keypoint_overlay(sketch, photo, sketch_kps, photo_kps, gt_kps=None) -> Image.Image:
    s = Image.fromarray(_to_uint8(sketch))
    p = Image.fromarray(_to_uint8(photo))
    canvas = Image.new("RGB", (s.width + p.width, max(s.height, p.height)), (255, 255, 255))
    canvas.paste(s, (0, 0))
    canvas.paste(p, (s.width, 0))
    d = ImageDraw.Draw(canvas)
    for i, (x, y) in enumerate(np.asarray(sketch_kps)):
        d.ellipse([x - 4, y - 4, x + 4, y + 4], fill=_PALETTE[i % 8], outline=(0, 0, 0))
    for i, (x, y) in enumerate(np.asarray(photo_kps)):
        x += s.width
        d.ellipse([x - 4, y - 4, x + 4, y + 4], fill=_PALETTE[i % 8], outline=(0, 0, 0))
    if gt_kps is not None:
        for i, (x, y) in enumerate(np.asarray(gt_kps)):
            x += s.width
            d.rectangle([x - 3, y - 3, x + 3, y + 3], outline=_PALETTE[i % 8], width=2)
    return canvas


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def export_visuals(out_dir, pair_id: str, photo, sketch, flow_photo_to_sketch, pyramids=None,
                   sketch_kps=None, pred_kps=None, gt_kps=None, weights=None) -> dict[str, Path]:
    """Write the visual summary of one pair; returns {kind: path}.

    ``photo``/``sketch`` are (3, H, W) tensors, ``flow_photo_to_sketch`` a
    (H, W, 2) field on the sketch grid, ``pyramids`` an optional
    ``{"photo": FeaturePyramid, "sketch": FeaturePyramid}`` and ``weights`` an
    optional ``{name: (h, w) array}`` of weight maps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _safe(pair_id)
    paths: dict[str, Path] = {}

    warped = warp(torch.as_tensor(photo), torch.as_tensor(flow_photo_to_sketch))
    paths["warped"] = out / f"{stem}_warped.png"
    Image.fromarray(_to_uint8(warped)).save(paths["warped"])

    if sketch_kps is not None and pred_kps is not None:
        paths["keypoints"] = out / f"{stem}_keypoints.png"
        keypoint_overlay(sketch, photo, sketch_kps, pred_kps, gt_kps).save(paths["keypoints"])

    for domain, pyr in (pyramids or {}).items():
        for stage, feat in sorted(pyr.levels.items()):
            key = f"pca_{domain}_stage{stage}"
            paths[key] = out / f"{stem}_{key}.png"
            rgb = pca_rgb(feat[0] if feat.dim() == 4 else feat)
            Image.fromarray(_to_uint8(rgb)).resize((256, 256), Image.NEAREST).save(paths[key])

    for name, w in (weights or {}).items():
        key = f"weights_{name}"
        paths[key] = out / f"{stem}_{key}.png"
        Image.fromarray(_to_uint8(heatmap(w, 256))).save(paths[key])
    return paths
