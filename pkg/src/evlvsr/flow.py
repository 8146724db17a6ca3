"""Backward warping and a small coarse-to-fine flow estimator."""

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidInputError
from .layers import conv, zero_init


def warp(feature: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp ``feature`` by ``flow`` with bilinear sampling.

    Output pixel (x, y) samples ``feature`` at (x + u, y + v); coordinates
    outside the image are clamped to the border (edge replication).

    Args:
        feature (Tensor): Shape (n, c, h, w).
        flow (Tensor): Shape (n, 2, h, w); channel 0 horizontal, 1 vertical.

    Returns:
        Tensor: Warped feature of shape (n, c, h, w).
    """
    n, c, h, w = feature.shape
    if flow.shape != (n, 2, h, w):
        raise InvalidInputError(
            f"flow shape {tuple(flow.shape)} does not match feature {tuple(feature.shape)}")
    ys = torch.arange(h, device=flow.device, dtype=flow.dtype).view(1, h, 1)
    xs = torch.arange(w, device=flow.device, dtype=flow.dtype).view(1, 1, w)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0 = sx.detach().floor()
    y0 = sy.detach().floor()
    wx = (sx - x0).unsqueeze(1).to(feature.dtype)
    wy = (sy - y0).unsqueeze(1).to(feature.dtype)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = feature.reshape(n, c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    top = (1 - wx) * gather(y0, x0) + wx * gather(y0, x1)
    bottom = (1 - wx) * gather(y1, x0) + wx * gather(y1, x1)
    return (1 - wy) * top + wy * bottom


class FlowRefiner(nn.Module):
    """Predicts a residual flow from (source, warped target, current flow)."""

    def __init__(self, in_channels: int, hidden: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            conv(2 * in_channels + 2, hidden, 5), nn.LeakyReLU(0.1),
            conv(hidden, hidden, 5), nn.LeakyReLU(0.1),
            conv(hidden, hidden // 2, 5), nn.LeakyReLU(0.1),
            zero_init(conv(hidden // 2, 2, 5)),
        )

    def forward(self, x):
        return self.body(x)


class FlowEstimator(nn.Module):
    """SpyNet-style pyramid flow network with ``levels`` refinement stages.

    ``forward(src, dst)`` returns the flow that aligns ``dst`` to ``src``:
    ``warp(dst, flow) ~= src``. The final layer of each stage starts at zero,
    so an untrained estimator predicts zero flow. Each pair is standardized
    with its joint mean and std first; dark low-contrast frames otherwise give
    the refiners almost no signal.
    """

    NORM_EPS = 1e-2

    def __init__(self, in_channels: int = 3, levels: int = 3, hidden: int = 32):
        super().__init__()
        self.levels = levels
        self.refiners = nn.ModuleList(FlowRefiner(in_channels, hidden) for _ in range(levels))

    def forward(self, src, dst):
        if src.shape != dst.shape:
            raise InvalidInputError(
                f"flow inputs differ in shape: {tuple(src.shape)} vs {tuple(dst.shape)}")
        h, w = src.shape[-2:]
        div = 2 ** (self.levels - 1)
        if h % div or w % div:
            raise InvalidInputError(f"spatial size {h}x{w} must be divisible by {div}")

        both = torch.cat([src, dst], 1)
        mu = both.mean(dim=(1, 2, 3), keepdim=True)
        sd = both.std(dim=(1, 2, 3), keepdim=True)
        src = (src - mu) / (sd + self.NORM_EPS)
        dst = (dst - mu) / (sd + self.NORM_EPS)

        srcs, dsts = [src], [dst]
        for _ in range(self.levels - 1):
            srcs.append(F.avg_pool2d(srcs[-1], 2))
            dsts.append(F.avg_pool2d(dsts[-1], 2))

        flow = None
        for level in reversed(range(self.levels)):
            s, d = srcs[level], dsts[level]
            if flow is None:
                flow = s.new_zeros(s.shape[0], 2, *s.shape[-2:])
            else:
                flow = 2.0 * F.interpolate(flow, scale_factor=2, mode="bilinear",
                                           align_corners=False)
            flow = flow + self.refiners[level](torch.cat([s, warp(d, flow), flow], 1))
        return flow


def estimate_flow(src, dst, estimator: FlowEstimator) -> torch.Tensor:
    return estimator(src, dst)
