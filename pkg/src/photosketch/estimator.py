"""Coarse-to-fine warp estimator: three residual STN blocks on feature affinities."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .warpcore import affinity, concat_pyramid, resize_flow, warp


@dataclass
class EstimatorConfig:
    stages: tuple[int, ...] = (2, 3)
    feature_side: int = 32  # side of the concatenated feature map for a 256 input
    block_sides: tuple[int, ...] = (4, 8, 16)
    hidden: int = 64
    output_side: int = 256


def _coords(side_h: int, side_w: int, dtype, device) -> torch.Tensor:
    ys = torch.linspace(-1, 1, side_h, dtype=dtype, device=device)
    xs = torch.linspace(-1, 1, side_w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])


class STNBlock(nn.Module):
    """Regresses a residual field at ``out_side`` from an (hw x hw) affinity.

    The affinity is viewed as an hw-channel map over the target grid: channel i
    at target pixel j holds the match score with source pixel i. Scores are
    standardised per target pixel and softmaxed over sources before a 1x1
    reduction whose first two filters start as source x/y coordinates, so the
    block begins with a soft-argmax readout. The regression head is zero
    initialised, so an untrained block outputs the identity.
    """

    def __init__(self, in_side: int, out_side: int, hidden: int = 64):
        super().__init__()
        self.in_side = in_side
        self.out_side = out_side
        n_src = in_side * in_side
        self.log_scale = nn.Parameter(torch.tensor(2.0))
        self.reduce = nn.Conv2d(n_src, hidden, 1)
        with torch.no_grad():
            c = _coords(in_side, in_side, torch.float32, None).reshape(2, n_src)
            self.reduce.weight[:2, :, 0, 0] = c
            self.reduce.bias[:2] = 0
        layers = []
        ch = hidden + 2
        side = in_side
        while side > out_side:
            layers += [nn.Conv2d(ch, hidden, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            ch = hidden
            side = (side + 1) // 2
        layers += [nn.Conv2d(ch, hidden, 3, padding=1), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(hidden, 2, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        # gain on the pooled soft-argmax offsets; zero so training starts at identity
        self.direct_gain = nn.Parameter(torch.zeros(1))

    def forward(self, aff: torch.Tensor) -> torch.Tensor:
        b, n, _ = aff.shape
        a = aff.reshape(b, n, self.in_side, self.in_side)
        var, mean = torch.var_mean(a, dim=1, keepdim=True)
        p = torch.softmax((a - mean) * (self.log_scale.exp() / (var.sqrt() + 1e-6)), dim=1)
        # 1x1 convolution as a matmul; much faster than the generic conv path on CPU
        w = self.reduce.weight.reshape(self.reduce.out_channels, n)
        x = (w @ p.reshape(b, n, -1)).reshape(b, -1, self.in_side, self.in_side)
        x = x + self.reduce.bias.reshape(1, -1, 1, 1)
        coords = _coords(self.in_side, self.in_side, x.dtype, x.device).expand(b, -1, -1, -1)
        offsets = x[:, :2] - coords
        x = self.body(torch.cat([offsets, F.relu(x[:, 2:]), coords], dim=1))
        if x.shape[-1] != self.out_side:
            x = F.interpolate(x, size=(self.out_side, self.out_side), mode="bilinear", align_corners=False)
        direct = F.adaptive_avg_pool2d(offsets, self.out_side) if self.in_side >= self.out_side else \
            F.interpolate(offsets, size=(self.out_side, self.out_side), mode="bilinear", align_corners=False)
        out = self.head(x) + self.direct_gain * direct
        # offsets are in units of half the grid side; convert to pixels of the block grid
        return out.permute(0, 2, 3, 1) * (self.out_side / 2)


class WarpEstimator(nn.Module):
    def __init__(self, config: EstimatorConfig | None = None):
        super().__init__()
        self.config = config = config or EstimatorConfig()
        self.blocks = nn.ModuleList(STNBlock(config.feature_side, s, config.hidden) for s in config.block_sides)

    def forward(self, xs: torch.Tensor, xt: torch.Tensor, return_all: bool = False):
        """Field on the target grid that warps ``xs`` onto ``xt``.

        ``xs`` and ``xt`` are concatenated feature maps (B, C, h, w). Returns the
        field at the last block's resolution (and every block's field when
        ``return_all``).
        """
        h, w = xt.shape[-2:]
        if (h, w) != (self.config.feature_side, self.config.feature_side):
            raise ValueError(f"estimator built for {self.config.feature_side}px features, got {h}x{w}")
        flow = None
        fields = []
        for block in self.blocks:
            src = xs if flow is None else warp(xs, resize_flow(flow, (h, w)))
            res = block(affinity(src, xt))
            flow = res if flow is None else resize_flow(flow, res.shape[1:3]) + res
            fields.append(flow)
        return (flow, fields) if return_all else flow


def estimate_flow(estimator: WarpEstimator, source_pyramid, target_pyramid, output_side: int | None = None):
    """Return the coarse (16x16) field and its full-resolution upsampling."""
    stages = estimator.config.stages
    xs = concat_pyramid(source_pyramid.select(stages))
    xt = concat_pyramid(target_pyramid.select(stages))
    coarse = estimator(xs, xt)
    side = output_side or estimator.config.output_side
    return coarse, resize_flow(coarse, (side, side))
