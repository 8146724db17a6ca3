"""Small building blocks shared by the network modules."""

import torch
from torch import nn
from torch.nn import functional as F


def conv(in_channels, out_channels, kernel_size=3, stride=1, groups=1, bias=True):
    return nn.Conv2d(in_channels, out_channels, kernel_size, stride,
                     kernel_size // 2, groups=groups, bias=bias)


@torch.no_grad()
def scale_init(module: nn.Module, scale: float) -> None:
    """Kaiming-init every conv in ``module`` and scale the weights."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0.1)
            m.weight.mul_(scale)
            if m.bias is not None:
                m.bias.zero_()


@torch.no_grad()
def zero_init(module: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(module.weight)
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


class ResidualBlock(nn.Module):
    """Residual block without normalization.

    ---Conv-LReLU-Conv-+-
     |________________|
    """

    def __init__(self, channels: int, res_scale: float = 1.0):
        super().__init__()
        self.conv1 = conv(channels, channels)
        self.conv2 = conv(channels, channels)
        self.act = nn.LeakyReLU(0.1)
        self.res_scale = res_scale
        scale_init(self, 0.1)

    def forward(self, x):
        return x + self.res_scale * self.conv2(self.act(self.conv1(x)))


class ShallowBranch(nn.Module):
    """Stem convolution followed by residual blocks."""

    def __init__(self, in_channels: int, channels: int, num_blocks: int = 2):
        super().__init__()
        self.stem = conv(in_channels, channels)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(num_blocks)])

    def forward(self, x):
        return self.blocks(self.stem(x))


class Downsample(nn.Module):
    """Stride-2 3x3 convolution followed by LeakyReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv(channels, channels, 3, stride=2)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        return self.act(self.conv(x))


class Upsample(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv(channels, channels)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        return self.act(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")))


class PixelShuffleUp(nn.Module):
    """Conv to 4x channels, then 2x pixel rearrangement."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = conv(channels, channels * 4)
        self.shuffle = nn.PixelShuffle(2)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, x):
        return self.act(self.shuffle(self.conv(x)))
