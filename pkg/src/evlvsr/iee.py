"""Illumination-guided event enhancement.

Illumination and event features are each turned into a four-level pyramid
(1, 1/2, 1/4, 1/8). At every level the two streams are concatenated and
fused by a convolution; a top-down pass then carries coarse context into the
finer levels. The three finest refined levels are returned.
"""

from typing import NamedTuple

import torch
from torch import nn

from .errors import InvalidInputError
from .layers import Downsample, ShallowBranch, Upsample, conv

PYRAMID_LEVELS = 4
# emitted scales guided by illumination -> number of fused pyramid levels
FUSED_LEVELS = {1: 1, 2: 2, 3: 4}


class MultiScaleEventFeatures(NamedTuple):
    s1: torch.Tensor
    s2: torch.Tensor
    s3: torch.Tensor


class IEE(nn.Module):
    """Args:
        channels (int): Feature width C.
        voxel_bins (int): Temporal bins of the event voxel input.
        scales (int): Number of emitted scales that receive illumination
            guidance (1, 2 or 3). The rest are strided convs of the finer one.
        guided (bool): If False, illumination is ignored entirely and the event
            pyramid is plain strided convolutions of the event features.
    """

    def __init__(self, channels: int = 32, voxel_bins: int = 5, scales: int = 3,
                 guided: bool = True):
        super().__init__()
        if scales not in FUSED_LEVELS:
            raise InvalidInputError(f"scales must be one of {sorted(FUSED_LEVELS)}, got {scales}")
        self.scales = scales
        self.guided = guided
        self.fused_levels = FUSED_LEVELS[scales] if guided else 0
        self.f_theta = ShallowBranch(1, channels)
        self.f_phi = ShallowBranch(voxel_bins, channels)

        n = self.fused_levels
        self.illum_down = nn.ModuleList(Downsample(channels) for _ in range(max(n - 1, 0)))
        self.event_down = nn.ModuleList(Downsample(channels) for _ in range(max(n - 1, 0)))
        self.fuse = nn.ModuleList(conv(2 * channels, channels) for _ in range(n))
        self.up = nn.ModuleList(Upsample(channels) for _ in range(max(n - 1, 0)))
        self.refine = nn.ModuleList(conv(channels, channels) for _ in range(max(n - 1, 0)))
        # unguided scales are strided convs of the next finer output
        self.plain_down = nn.ModuleList(Downsample(channels)
                                        for _ in range(3 - min(max(n, 1), 3)))
        self.act = nn.LeakyReLU(0.1)

    def shallow_features(self, illumination, voxels):
        if illumination.shape[-2:] != voxels.shape[-2:] or illumination.shape[0] != voxels.shape[0]:
            raise InvalidInputError(
                f"illumination {tuple(illumination.shape)} and voxels "
                f"{tuple(voxels.shape)} are not spatially aligned")
        return self.f_theta(illumination), self.f_phi(voxels)

    def forward(self, illumination, voxels, return_shallow=False):
        h, w = voxels.shape[-2:]
        div = 2 ** (PYRAMID_LEVELS - 1)
        if h % div or w % div:
            raise InvalidInputError(f"spatial size {h}x{w} must be divisible by {div}")
        f_i, f_e = self.shallow_features(illumination, voxels)

        outs = []
        if self.fused_levels:
            illum_pyr, event_pyr = [f_i], [f_e]
            for down_i, down_e in zip(self.illum_down, self.event_down):
                illum_pyr.append(down_i(illum_pyr[-1]))
                event_pyr.append(down_e(event_pyr[-1]))
            fused = [self.act(fuse(torch.cat([a, b], 1)))
                     for fuse, a, b in zip(self.fuse, illum_pyr, event_pyr)]
            x = fused[-1]
            refined = [x]
            for level in reversed(range(len(fused) - 1)):
                x = self.act(self.refine[level](fused[level] + self.up[level](x)))
                refined.append(x)
            outs = refined[::-1][:3]
        else:
            outs = [f_e]
        for down in self.plain_down:
            outs.append(down(outs[-1]))
        feats = MultiScaleEventFeatures(*outs)
        if return_shallow:
            return feats, f_i, f_e
        return feats


def shallow_features(illumination, voxels, params: IEE):
    return params.shallow_features(illumination, voxels)


def iee_forward(illumination, voxels, params: IEE) -> MultiScaleEventFeatures:
    return params(illumination, voxels)
