"""Displacement fields, bilinear warping and feature affinities.

Flow convention used throughout the package: a displacement field has shape
``(B, H, W, 2)`` (``x`` offset first) and lives on the *output* grid. The value
at pixel ``p`` is the offset, in pixels of that grid, added to ``p`` to find
the location sampled from the source. Pixel ``i`` of a grid with ``W`` columns
covers the continuous interval ``[i, i + 1)``, so resampling a field from width
``W`` to width ``W'`` scales its x offsets by ``W' / W``.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F


def identity_field(height: int, width: int, batch: int = 1, dtype=torch.float32, device=None) -> torch.Tensor:
    return torch.zeros(batch, height, width, 2, dtype=dtype, device=device)


def base_grid(height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Integer pixel coordinates as a ``(H, W, 2)`` tensor, x first."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def _as_batched_flow(flow: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if flow.dim() == 3:
        return flow.unsqueeze(0), True
    if flow.dim() != 4 or flow.shape[-1] != 2:
        raise ValueError(f"displacement field must be (B, H, W, 2), got {tuple(flow.shape)}")
    return flow, False


def bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` (B, C, H, W) at pixel positions ``x, y`` (B, *S).

    Positions outside the image are clamped to the border. Returns (B, C, *S).
    Differentiable w.r.t. both the image and the positions.
    """
    b, c, h, w = image.shape
    spatial = x.shape[1:]
    x = x.reshape(b, -1).clamp(0, w - 1)
    y = y.reshape(b, -1).clamp(0, h - 1)

    x0 = x.detach().floor().clamp(max=max(w - 2, 0))
    y0 = y.detach().floor().clamp(max=max(h - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).unsqueeze(1).expand(b, c, -1)
        return flat.gather(2, idx)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out.reshape(b, c, *spatial)


def resize_flow(flow: torch.Tensor, size: Sequence[int]) -> torch.Tensor:
    """Bilinearly resample a field to ``size = (h, w)`` and rescale its offsets."""
    flow, squeezed = _as_batched_flow(flow)
    h, w = int(size[0]), int(size[1])
    H, W = flow.shape[1:3]
    if (h, w) == (H, W):
        out = flow
    else:
        out = F.interpolate(flow.permute(0, 3, 1, 2), size=(h, w), mode="bilinear", align_corners=False)
        scale = torch.tensor([w / W, h / H], dtype=flow.dtype, device=flow.device)
        out = out.permute(0, 2, 3, 1) * scale
    return out[0] if squeezed else out


def warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``image`` (B, C, H, W) or (C, H, W) with ``flow``.

    ``output(p) = image(p + flow(p))`` with bilinear interpolation and
    clamp-to-edge borders. A field at a different resolution is resampled to the
    image grid first.
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    flow, _ = _as_batched_flow(flow)
    if not torch.isfinite(flow).all():
        raise ValueError("displacement field contains non-finite offsets")
    h, w = image.shape[-2:]
    flow = resize_flow(flow, (h, w))
    if flow.shape[0] != image.shape[0]:
        flow = flow.expand(image.shape[0], -1, -1, -1)
    grid = base_grid(h, w, dtype=flow.dtype, device=flow.device)
    pos = grid + flow
    out = bilinear_sample(image, pos[..., 0], pos[..., 1])
    return out[0] if squeeze else out


def warp_field(field: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp a displacement field (B, H, W, 2) by ``flow``; returns a field."""
    field, squeezed = _as_batched_flow(field)
    out = warp(field.permute(0, 3, 1, 2), flow).permute(0, 2, 3, 1)
    return out[0] if squeezed else out


def compose_flows(first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
    """Field equivalent to sampling with ``first`` and then with ``second``.

    If ``a = warp(img, first)`` and ``b = warp(a, second)`` then
    ``b ~= warp(img, compose_flows(first, second))``.
    """
    return second + warp_field(first, second)


def sample_field_at(field: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear field values at (N, 2) or (B, N, 2) pixel positions."""
    field, squeezed = _as_batched_flow(field)
    if points.dim() == 2:
        points = points.unsqueeze(0)
    vals = bilinear_sample(field.permute(0, 3, 1, 2), points[..., 0], points[..., 1])
    vals = vals.permute(0, 2, 1)
    return vals[0] if squeezed else vals


def concat_pyramid(levels: Sequence[torch.Tensor]) -> torch.Tensor:
    """Upsample feature maps (B, C_i, H_i, W_i) to the finest resolution and concatenate.

    Channel order follows the order of ``levels``.
    """
    if len(levels) == 0:
        raise ValueError("concat_pyramid needs at least one feature level")
    h = max(t.shape[-2] for t in levels)
    w = max(t.shape[-1] for t in levels)
    out = []
    for t in levels:
        if t.shape[-2:] != (h, w):
            t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
        out.append(t)
    return torch.cat(out, dim=1)


def affinity(source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pairwise inner products ``A[b, i, j] = <source[b, :, i], target[b, :, j]>``.

    Inputs are (B, C, H, W) or (C, H, W); output is (B, HW, HW) or (HW, HW).
    """
    if source.shape != target.shape:
        raise ValueError(f"affinity needs matching shapes, got {tuple(source.shape)} and {tuple(target.shape)}")
    squeeze = source.dim() == 3
    if squeeze:
        source, target = source.unsqueeze(0), target.unsqueeze(0)
    b, c = source.shape[:2]
    a = torch.bmm(source.reshape(b, c, -1).transpose(1, 2), target.reshape(b, c, -1))
    return a[0] if squeeze else a


def normalized_affinity_stack(
    source_levels: Sequence[torch.Tensor],
    target_levels: Sequence[torch.Tensor],
    size: Sequence[int] | None = None,
) -> torch.Tensor:
    """Per-layer cosine affinities stacked to (B, n, hw, hw).

    Every level is resampled to ``size`` (default: the finest level) and
    L2-normalised per pixel before correlating, so entries lie in [-1, 1].
    """
    if len(source_levels) != len(target_levels) or not source_levels:
        raise ValueError("need the same, non-zero number of source and target levels")
    if size is None:
        size = (max(t.shape[-2] for t in source_levels), max(t.shape[-1] for t in source_levels))
    size = tuple(int(s) for s in size)
    out = []
    for xs, xt in zip(source_levels, target_levels):
        if xs.shape[-2:] != size:
            xs = F.interpolate(xs, size=size, mode="bilinear", align_corners=False)
        if xt.shape[-2:] != size:
            xt = F.interpolate(xt, size=size, mode="bilinear", align_corners=False)
        out.append(affinity(F.normalize(xs, dim=1), F.normalize(xt, dim=1)))
    return torch.stack(out, dim=1)
