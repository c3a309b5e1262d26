import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from photosketch.augment import (AugmentConfig, augment, augment_image, photometric, sample_spatial_params,
                                 spatial_field, tps_grid_points, tps_offsets)
from photosketch.dataset import ImagePair
from photosketch.synthetic import random_scene
from photosketch.warpcore import warp


def _pair(side=64, seed=0):
    rng = np.random.default_rng(seed)
    return ImagePair("p", "p-1", "c", _photo=random_scene(rng, side, 10), _sketch=random_scene(rng, side, 10))


def test_identity_config_returns_inputs():
    pair = _pair()
    a, b = augment(pair, AugmentConfig.identity(), seed=3)
    assert torch.equal(a.image, torch.from_numpy(pair.photo).permute(2, 0, 1))
    assert torch.equal(b.image, torch.from_numpy(pair.sketch).permute(2, 0, 1))
    assert torch.equal(a.gt_flow, torch.zeros(64, 64, 2))
    assert (a.domain_tag, b.domain_tag) == ("photo", "sketch")


def test_no_spatial_means_no_flow():
    v = augment_image(np.zeros((8, 8, 3), np.float32), "sketch", AugmentConfig(spatial=False), np.random.default_rng(0))
    assert v.gt_flow is None


def test_tps_zero_displacement_is_identity():
    f = spatial_field(32, tps_displacements=np.zeros((9, 2)), tps_grid=3)
    assert np.abs(f).max() <= 1e-6


def test_tps_interpolates_control_points():
    rng = np.random.default_rng(0)
    ctrl = tps_grid_points(3)
    disp = rng.uniform(-0.2, 0.2, size=(9, 2))
    assert np.allclose(tps_offsets(ctrl, disp, ctrl), disp, atol=1e-10)


def test_translation_matches_pixel_shift():
    side = 48
    ramp = np.tile(np.arange(side, dtype=np.float32), (side, 1))
    img = np.repeat(ramp[..., None], 3, axis=2) / side
    f = spatial_field(side, translation=(8.0, 0.0))
    assert np.allclose(f[..., 0], -8.0) and np.allclose(f[..., 1], 0.0)
    out = warp(torch.from_numpy(img).permute(2, 0, 1), torch.from_numpy(f.astype(np.float32)))
    shifted = np.roll(img, 8, axis=1)  # direct pixel shift oracle
    assert np.abs(out.permute(1, 2, 0).numpy()[:, 8:] - shifted[:, 8:]).max() < 1e-6


def test_rotation_field_analytic():
    side = 33
    f = spatial_field(side, rotation=math.pi / 2)
    c = (side - 1) / 2
    # content rotated by +90 deg: output (x, y) samples source rotated by -90 deg about the centre
    x, y = 30, 5
    sx, sy = x + f[y, x, 0], y + f[y, x, 1]
    assert sx == pytest.approx(c + (y - c), abs=1e-9)
    assert sy == pytest.approx(c - (x - c), abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_gt_flow_reproduces_transformed_image(seed):
    side = 64
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(random_scene(rng, side, 10)).permute(2, 0, 1)
    cfg = AugmentConfig(jitter_p=0, grayscale_p=0, blur_p=0)
    view = augment_image(img, "photo", cfg, np.random.default_rng(seed))
    again = warp(img, view.gt_flow)
    assert (again - view.image)[:, 4:-4, 4:-4].abs().mean() < 2 / 255


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_spatial_inverse_recovers_identity(seed):
    side = 64
    rng = np.random.default_rng(seed)
    p = sample_spatial_params(rng, AugmentConfig(tps_magnitude=0.0))
    fwd = spatial_field(side, p["rotation"], p["scale"], p["translation_frac"] * side)
    # inverse affine: rotate back, inverse scale, opposite translation applied first
    ys, xs = np.meshgrid(np.arange(side, dtype=float), np.arange(side, dtype=float), indexing="ij")
    pts = np.stack([xs, ys], -1)
    src = pts + fwd
    c = (side - 1) / 2
    t = p["translation_frac"] * side
    rot = p["rotation"]
    r = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    back = (src - c) @ r.T * p["scale"] + c + t
    assert np.abs(back - pts).max() < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_photometric_stays_in_range(seed):
    rng = np.random.default_rng(seed)
    img = torch.from_numpy(rng.random((3, 16, 16), dtype=np.float32))
    out = photometric(img, rng, AugmentConfig(jitter_p=1, grayscale_p=0.5, blur_p=0.5))
    assert out.min() >= 0 and out.max() <= 1


def test_augment_deterministic_and_independent():
    pair = _pair()
    cfg = AugmentConfig()
    a1, b1 = augment(pair, cfg, 11)
    a2, b2 = augment(pair, cfg, 11)
    assert torch.equal(a1.image, a2.image) and torch.equal(b1.gt_flow, b2.gt_flow)
    assert not torch.equal(a1.gt_flow, b1.gt_flow)
    a3, _ = augment(pair, cfg, 12)
    assert not torch.equal(a1.gt_flow, a3.gt_flow)


def test_default_ranges():
    c = AugmentConfig()
    assert (c.rotation_deg, c.scale, c.translation, c.tps_grid, c.tps_magnitude) == (15.0, (0.85, 1.15), 0.1, 3, 0.15)
