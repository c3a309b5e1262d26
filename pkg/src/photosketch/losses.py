"""Weighted perceptual similarity and forward-backward consistency objectives."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .warpcore import normalized_affinity_stack, resize_flow, warp, warp_field


@dataclass
class LossConfig:
    lambda_sim: float = 0.1
    lambda_con: float = 1.0
    tau_sim: float = 0.001
    weight_temperature: float = 0.001
    loss_stages: tuple[int, ...] = (2, 3)
    loss_side: Optional[int] = None  # common affinity resolution; None = finest loss stage
    perceptual: bool = True
    use_weights: bool = True

    def validate(self) -> None:
        if self.lambda_sim < 0 or self.lambda_con < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau_sim <= 0 or self.weight_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if not self.loss_stages:
            raise ValueError("loss_stages must not be empty")


# an encoder callable: (images (B,3,H,W), domain tag) -> FeaturePyramid
EncodeFn = Callable[[torch.Tensor, str], "object"]


def perceptual_affinity(source_img, flow, target_img, encode_fn: EncodeFn, source_domain: str,
                        target_domain: str, stages: Sequence[int], size=None, target_pyramid=None,
                        perceptual: bool = True, source_pyramid=None) -> torch.Tensor:
    """Cosine affinities between the re-encoded warped source and the target, (B, n, hw, hw).

    ``flow`` is the full-resolution source->target field on the target grid. The
    warped image keeps the source domain's normalisation branch. With
    ``perceptual=False`` the source *features* are warped instead (no re-encoding).
    """
    if target_pyramid is None:
        target_pyramid = encode_fn(target_img, target_domain)
    tgt = target_pyramid.select(stages)
    if perceptual:
        warped = warp(source_img, flow)
        src = encode_fn(warped, source_domain).select(stages)
    else:
        if source_pyramid is None:
            source_pyramid = encode_fn(source_img, source_domain)
        src = [warp(x, flow) for x in source_pyramid.select(stages)]
    return normalized_affinity_stack(src, tgt, size)


def similarity_term(stack: torch.Tensor, tau: float) -> torch.Tensor:
    """``s(n, i) = -log softmax_j(A[n, i, j] / tau)[i]``; shape (..., n, hw)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    logits = stack / tau
    diag = torch.diagonal(logits, dim1=-2, dim2=-1)
    return torch.logsumexp(logits, dim=-1) - diag


@torch.no_grad()
def weight_map(stack: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Per-pixel importance in [0, 1], shape (..., n, hw).

    Softmax over target pixels, max over them, then Min-Max over each
    (layer, image) slice. Constant slices map to zeros. No gradient flows.
    """
    peak = torch.softmax(stack / temperature, dim=-1).amax(dim=-1)
    lo = peak.amin(dim=-1, keepdim=True)
    hi = peak.amax(dim=-1, keepdim=True)
    span = hi - lo
    return torch.where(span > 0, (peak - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                       torch.zeros_like(peak))


def weighted_similarity(stack: torch.Tensor, tau: float, weights: Optional[torch.Tensor] = None,
                        weight_temperature: float = 1.0, use_weights: bool = True) -> torch.Tensor:
    """Mean over layers and pixels (and batch) of ``w * s``."""
    s = similarity_term(stack, tau)
    if use_weights:
        w = weight_map(stack, weight_temperature) if weights is None else weights
        s = s * w.detach()
    return s.mean()


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(-1)
    nz = sq > 0
    return torch.where(nz, torch.sqrt(torch.where(nz, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def consistency_loss(flow_st: torch.Tensor, flow_ts: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel L2 deviation of the round trip from the identity.

    The round trip of source pixel q is ``q + F_ts(q) + F_st(q + F_ts(q))``.
    Residuals are measured in normalised units (half the image side = 1), so the
    value does not depend on the field resolution.
    """
    if flow_st.shape != flow_ts.shape:
        raise ValueError(f"field shapes differ: {tuple(flow_st.shape)} vs {tuple(flow_ts.shape)}")
    squeeze = flow_st.dim() == 3
    if squeeze:
        flow_st, flow_ts = flow_st.unsqueeze(0), flow_ts.unsqueeze(0)
    h, w = flow_st.shape[1:3]
    resid = flow_ts + warp_field(flow_st, flow_ts)
    scale = torch.tensor([2.0 / w, 2.0 / h], dtype=resid.dtype, device=resid.device)
    return _safe_norm(resid * scale).mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    sim_fwd: float
    sim_bwd: float
    con: float

    def as_dict(self) -> dict:
        return {"total": float(self.total.detach()), "sim_fwd": self.sim_fwd, "sim_bwd": self.sim_bwd,
                "con": self.con}


def total_loss(source_img, target_img, flow_st, flow_ts, encode_fn: EncodeFn, config: LossConfig,
               source_domain: str = "photo", target_domain: str = "sketch",
               source_pyramid=None, target_pyramid=None, weights=None) -> LossBreakdown:
    """Full estimator objective for a batch of (source, target) pairs.

    ``flow_st`` warps the source onto the target (lives on the target grid);
    ``flow_ts`` the reverse. Fields at a coarser resolution are upsampled to the
    image size for warping. ``weights`` optionally fixes the (fwd, bwd) weight
    maps. With ``lambda_sim == 0`` the similarity terms are computed for logging
    only and carry no gradient.
    """
    side = source_img.shape[-2:]
    full_st = resize_flow(flow_st, side)
    full_ts = resize_flow(flow_ts, side)
    grad_sim = config.lambda_sim > 0
    w_fwd, w_bwd = weights if weights is not None else (None, None)

    with torch.set_grad_enabled(grad_sim and torch.is_grad_enabled()):
        a_fwd = perceptual_affinity(source_img, full_st, target_img, encode_fn, source_domain, target_domain,
                                    config.loss_stages, config.loss_side, target_pyramid, config.perceptual,
                                    source_pyramid)
        a_bwd = perceptual_affinity(target_img, full_ts, source_img, encode_fn, target_domain, source_domain,
                                    config.loss_stages, config.loss_side, source_pyramid, config.perceptual,
                                    target_pyramid)
        sim_fwd = weighted_similarity(a_fwd, config.tau_sim, w_fwd, config.weight_temperature, config.use_weights)
        sim_bwd = weighted_similarity(a_bwd, config.tau_sim, w_bwd, config.weight_temperature, config.use_weights)

    con = consistency_loss(flow_st, flow_ts) + consistency_loss(flow_ts, flow_st)
    total = config.lambda_con * con
    if grad_sim:
        total = total + config.lambda_sim * (sim_fwd + sim_bwd)
    return LossBreakdown(total, float(sim_fwd.detach()), float(sim_bwd.detach()), float(con.detach()))
