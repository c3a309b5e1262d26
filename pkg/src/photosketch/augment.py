"""Photometric and spatial (affine + TPS) augmentation with ground-truth flow."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torchvision.transforms.v2.functional as TF

from .warpcore import warp


@dataclass
class AugmentConfig:
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    spatial: bool = True
    rotation_deg: float = 15.0
    scale: tuple[float, float] = (0.85, 1.15)
    translation: float = 0.1
    tps_grid: int = 3
    tps_magnitude: float = 0.15

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(jitter_p=0.0, grayscale_p=0.0, blur_p=0.0, rotation_deg=0.0, scale=(1.0, 1.0),
                   translation=0.0, tps_magnitude=0.0)


@dataclass
class AugmentedView:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    domain_tag: str
    gt_flow: Optional[torch.Tensor] = None  # (H, W, 2) sampling offsets into the original image


def to_tensor(image) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (3, H, W) float tensor."""
    if isinstance(image, torch.Tensor):
        return image if image.shape[0] == 3 else image.permute(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)


def _to_norm(p, size):
    return 2.0 * p / (size - 1) - 1.0


def _tps_kernel(r2):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r2 * np.log(r2)
    return np.nan_to_num(out, nan=0.0)


def tps_offsets(control: np.ndarray, displacements: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Thin-plate spline through ``control -> control + displacements``, evaluated at ``points``.

    All arrays hold (N, 2) coordinates; returns the (M, 2) interpolated displacement.
    """
    n = len(control)
    d2 = ((control[:, None] - control[None]) ** 2).sum(-1)
    P = np.hstack([np.ones((n, 1)), control])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _tps_kernel(d2)
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = displacements
    coef = np.linalg.solve(L, rhs)
    u = _tps_kernel(((points[:, None] - control[None]) ** 2).sum(-1))
    return u @ coef[:n] + np.hstack([np.ones((len(points), 1)), points]) @ coef[n:]


def tps_grid_points(grid_size: int) -> np.ndarray:
    axis = np.linspace(-1.0, 1.0, grid_size)
    gy, gx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def spatial_field(size: int, rotation: float = 0.0, scale: float = 1.0, translation=(0.0, 0.0),
                  tps_displacements: Optional[np.ndarray] = None, tps_grid: int = 3) -> np.ndarray:
    """Analytic sampling offsets (H, W, 2) for ``affine`` followed by ``TPS``.

    The affine part moves image content: rotation (radians) and scale about the
    centre, then ``translation`` in pixels. TPS displacements are given in
    normalised [-1, 1] units at a ``tps_grid`` x ``tps_grid`` lattice and displace
    the sampling grid directly. The transformed image is ``orig(p + field(p))``.
    """
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if tps_displacements is not None and np.any(tps_displacements):
        norm = _to_norm(pts, size)
        off = tps_offsets(tps_grid_points(tps_grid), np.asarray(tps_displacements, dtype=np.float64), norm)
        sample = pts + off * (size - 1) / 2.0
    else:
        sample = pts
    c = (size - 1) / 2.0
    cos, sin = math.cos(rotation), math.sin(rotation)
    rinv = np.array([[cos, sin], [-sin, cos]])  # inverse rotation
    src = (sample - c - np.asarray(translation, dtype=np.float64)) @ rinv.T / scale + c
    return (src - pts).reshape(size, size, 2)


def sample_spatial_params(rng: np.random.Generator, config: AugmentConfig) -> dict:
    while True:
        rot = math.radians(rng.uniform(-config.rotation_deg, config.rotation_deg))
        scale = rng.uniform(*config.scale)
        if abs(scale) > 1e-3:  # non-invertible affine is resampled
            break
    t = rng.uniform(-config.translation, config.translation, size=2)
    disp = rng.uniform(-config.tps_magnitude, config.tps_magnitude, size=(config.tps_grid**2, 2)) * 2.0
    return {"rotation": rot, "scale": scale, "translation_frac": t, "tps_displacements": disp}


def random_spatial_field(rng: np.random.Generator, config: AugmentConfig, size: int) -> torch.Tensor:
    p = sample_spatial_params(rng, config)
    field = spatial_field(size, p["rotation"], p["scale"], p["translation_frac"] * size,
                          p["tps_displacements"], config.tps_grid)
    return torch.from_numpy(field.astype(np.float32))


def photometric(image: torch.Tensor, rng: np.random.Generator, config: AugmentConfig) -> torch.Tensor:
    if rng.random() < config.jitter_p:
        b = rng.uniform(max(0.0, 1 - config.brightness), 1 + config.brightness)
        c = rng.uniform(max(0.0, 1 - config.contrast), 1 + config.contrast)
        s = rng.uniform(max(0.0, 1 - config.saturation), 1 + config.saturation)
        h = rng.uniform(-config.hue, config.hue)
        image = TF.adjust_brightness(image, b)
        image = TF.adjust_contrast(image, c)
        image = TF.adjust_saturation(image, s)
        image = TF.adjust_hue(image, h)
    if rng.random() < config.grayscale_p:
        image = TF.rgb_to_grayscale(image, num_output_channels=3)
    if rng.random() < config.blur_p:
        sigma = float(rng.uniform(*config.blur_sigma))
        k = 2 * math.ceil(3 * sigma) + 1
        image = TF.gaussian_blur(image, [k, k], [sigma, sigma])
    return image.clamp(0.0, 1.0)


def augment_image(image, domain_tag: str, config: AugmentConfig, rng: np.random.Generator) -> AugmentedView:
    img = to_tensor(image)
    flow = None
    if config.spatial:
        flow = random_spatial_field(rng, config, img.shape[-1])
        img = warp(img, flow)
    img = photometric(img, rng, config)
    return AugmentedView(img, domain_tag, flow)


def augment(pair, config: AugmentConfig, seed: int) -> tuple[AugmentedView, AugmentedView]:
    """Independently augmented (photo view, sketch view) of an ImagePair."""
    photo_seq, sketch_seq = np.random.SeedSequence(seed).spawn(2)
    return (
        augment_image(pair.photo, "photo", config, np.random.default_rng(photo_seq)),
        augment_image(pair.sketch, "sketch", config, np.random.default_rng(sketch_seq)),
    )
