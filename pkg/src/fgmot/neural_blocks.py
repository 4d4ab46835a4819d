"""Building blocks for aligned multi-scale feature aggregation.

Feature maps are (N, C, H, W) tensors over ROI-cropped grids. Offset fields
("semantic flow") are (N, 2, H, W) with channel 0 = horizontal and channel 1 =
vertical displacement in feature-grid units. One bilinear convention is used
everywhere: pixel centers sit at integer coordinates, samples outside the grid
contribute zero.
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class PyramidConfig:
    """Shape contract for the aligned pyramid.

    in_channels is listed coarsest scale first. unified_channels must be
    divisible by num_parts because the mask head downstream slices the
    unified feature map into num_parts channel blocks.
    """

    in_channels: tuple = (256, 128, 64)
    unified_channels: int = 192
    num_parts: int = 6
    flow_kernel: int = 3
    align: bool = True

    def __post_init__(self):
        self.in_channels = tuple(int(c) for c in self.in_channels)
        if self.num_scales < 2:
            raise ValueError("pyramid needs at least 2 scales, got %d" % self.num_scales)
        if self.unified_channels % self.num_parts != 0:
            raise ValueError(
                "unified_channels=%d not divisible by num_parts=%d"
                % (self.unified_channels, self.num_parts)
            )
        if self.flow_kernel % 2 != 1:
            raise ValueError("flow_kernel must be odd")

    @property
    def num_scales(self) -> int:
        return len(self.in_channels)


def bilinear_sample(x: torch.Tensor, px: torch.Tensor, py: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample x (N,C,H,W) at continuous coords (px,py), each (N,h,w).

    Coordinates are in feature-grid units (pixel i at coordinate i). Samples
    whose support pixels fall outside the grid receive zero contribution from
    those pixels. Differentiable in x and in the coordinates.
    """
    n, c, h, w = x.shape
    x0 = torch.floor(px)
    y0 = torch.floor(py)
    out = None
    flat = x.reshape(n, c, h * w)
    for yi, wy in ((y0, 1.0 - (py - y0)), (y0 + 1.0, py - y0)):
        for xi, wx in ((x0, 1.0 - (px - x0)), (x0 + 1.0, px - x0)):
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc = xi.clamp(0, w - 1).long()
            yc = yi.clamp(0, h - 1).long()
            idx = (yc * w + xc).reshape(n, 1, -1).expand(n, c, -1)
            vals = torch.gather(flat, 2, idx).reshape(n, c, *px.shape[1:])
            term = vals * (wy * wx * inside).unsqueeze(1)
            out = term if out is None else out + term
    return out


def warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Warp x by a per-pixel offset field: out(p) = sample of x at p + flow(p)."""
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError("flow shape %s does not match map %s" % (tuple(flow.shape), tuple(x.shape)))
    ys = torch.arange(h, dtype=x.dtype, device=x.device).view(1, h, 1)
    xs = torch.arange(w, dtype=x.dtype, device=x.device).view(1, 1, w)
    return bilinear_sample(x, xs + flow[:, 0], ys + flow[:, 1])


def bilinear_upsample(x: torch.Tensor, target_hw) -> torch.Tensor:
    """Standard align-corners-false bilinear resize to target_hw (no shrinking)."""
    th, tw = int(target_hw[0]), int(target_hw[1])
    h, w = x.shape[-2:]
    if th < h or tw < w:
        raise ValueError("target %s smaller than source %s" % ((th, tw), (h, w)))
    if (th, tw) == (h, w):
        return x
    return F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)


class ResBlock(nn.Module):
    """1x1-conv residual channel transform: act(h + BN2(Conv2(h))), h = BN1(Conv1(x))."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.proj = nn.Conv2d(c_in, c_out, 1)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv = nn.Conv2d(c_out, c_out, 1)
        self.bn2 = nn.BatchNorm2d(c_out)

    def forward(self, x):
        h = self.bn1(self.proj(x))
        return F.relu(h + self.bn2(self.conv(h)))


class FlowAlign(nn.Module):
    """Aligns a coarse map with a finer one through learned offset fields.

    The coarse map is upsampled to the fine grid, both maps are concatenated,
    and a single conv predicts two 2-channel offset fields: one applied to the
    fine map, one to the upsampled coarse map. The two warped maps are summed.
    The offset conv is zero-initialized so the module starts as a plain
    upsample-and-sum fusion.
    """

    def __init__(self, channels: int, kernel: int = 3, align: bool = True):
        super().__init__()
        self.channels = channels
        self.align = align
        self.flow_conv = nn.Conv2d(2 * channels, 4, kernel, padding=kernel // 2)
        nn.init.zeros_(self.flow_conv.weight)
        nn.init.zeros_(self.flow_conv.bias)

    def forward(self, f_low, f_high):
        if f_low.shape[1] != self.channels or f_high.shape[1] != self.channels:
            raise ValueError(
                "channel mismatch: expected %d, got %d and %d"
                % (self.channels, f_low.shape[1], f_high.shape[1])
            )
        up = bilinear_upsample(f_low, f_high.shape[-2:])
        if not self.align:
            return f_high + up
        flows = self.flow_conv(torch.cat([up, f_high], dim=1))
        return warp(f_high, flows[:, 0:2]) + warp(up, flows[:, 2:4])


class AlignedPyramid(nn.Module):
    """Top-down aggregation of S feature scales into two task-specific maps.

    Input maps are listed coarsest to finest. Every scale is first projected
    to a unified channel width by a ResBlock; the running aggregate is then
    repeatedly fused with the next finer scale through FlowAlign. Two
    independent ResBlock heads on the finest aggregate emit the mask-branch
    and the embedding-branch feature maps.
    """

    def __init__(self, cfg: PyramidConfig):
        super().__init__()
        self.cfg = cfg
        cu = cfg.unified_channels
        self.input_blocks = nn.ModuleList(ResBlock(c, cu) for c in cfg.in_channels)
        self.aligners = nn.ModuleList(
            FlowAlign(cu, cfg.flow_kernel, cfg.align) for _ in range(cfg.num_scales - 1)
        )
        self.mask_head = ResBlock(cu, cu)
        self.reid_head = ResBlock(cu, cu)

    def forward(self, maps):
        cfg = self.cfg
        if len(maps) != cfg.num_scales:
            raise ValueError("expected %d scales, got %d" % (cfg.num_scales, len(maps)))
        for m, c in zip(maps, cfg.in_channels):
            if m.shape[1] != c:
                raise ValueError("scale channel mismatch: expected %d, got %d" % (c, m.shape[1]))
        agg = self.input_blocks[0](maps[0])
        for rb, fam, m in zip(self.input_blocks[1:], self.aligners, maps[1:]):
            agg = fam(agg, rb(m))
        return self.mask_head(agg), self.reid_head(agg)
