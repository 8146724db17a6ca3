"""Event-guided reflectance enhancement with dynamic cross-modal attention.

Attention is transposed (channel-to-channel, C x C per sample) so its cost is
linear in the number of pixels. Event keys and values are expanded by the
dynamic contrast extractor into D temporal slices, and the attended values of
all slices are summed.
"""

from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import InvalidInputError
from .iee import MultiScaleEventFeatures
from .layers import Downsample, ResidualBlock, Upsample, conv, zero_init


class DynamicKV(NamedTuple):
    """Keys and values of shape (n, D, C, N) with N = H * W."""

    keys: torch.Tensor
    values: torch.Tensor


class Projection(nn.Module):
    """1x1 convolution followed by a 3x3 depth-wise convolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.point = conv(channels, channels, 1)
        self.depth = conv(channels, channels, 3, groups=channels)

    def forward(self, x):
        return self.depth(self.point(x))


class DynamicContrastExtractor(nn.Module):
    """Depth-wise conv stacks expanding C channels into D slices of C."""

    def __init__(self, channels: int, depth: int = 4):
        super().__init__()
        self.depth = depth
        wide = channels * depth

        def stack():
            return nn.Sequential(conv(channels, wide, 3, groups=channels), nn.GELU(),
                                 conv(wide, wide, 3, groups=wide))

        self.key = stack()
        self.value = stack()

    def _split(self, x):
        n, _, h, w = x.shape
        # grouped conv orders output channels as (C, D)
        return x.view(n, -1, self.depth, h * w).transpose(1, 2)

    def forward(self, key_feat, value_feat=None) -> DynamicKV:
        if value_feat is None:
            value_feat = key_feat
        return DynamicKV(self._split(self.key(key_feat)), self._split(self.value(value_feat)))


def dynamic_cross_attention(query, kv: DynamicKV, temperature, return_attention=False):
    """Sum over temporal slices of channel attention from query to event keys.

    Args:
        query (Tensor): Shape (n, C, N).
        kv (DynamicKV): Keys/values of shape (n, D, C, N).
        temperature (Tensor | float): Multiplier on the cosine-similarity logits.

    Returns:
        Tensor of shape (n, C, N), and the (n, D, C, C) attention if requested.
    """
    keys, values = kv
    if keys.shape != values.shape or keys.ndim != 4:
        raise InvalidInputError("keys and values must share shape (n, D, C, N)")
    if query.ndim != 3 or query.shape[0] != keys.shape[0] or query.shape[1:] != keys.shape[2:]:
        raise InvalidInputError(
            f"query {tuple(query.shape)} incompatible with keys {tuple(keys.shape)}")
    q = F.normalize(query, dim=-1)
    k = F.normalize(keys, dim=-1)
    logits = torch.einsum("ncl,ndkl->ndck", q, k) * temperature
    attn = logits.softmax(dim=-1)
    out = torch.einsum("ndck,ndkl->ncl", attn, values)
    if return_attention:
        return out, attn
    return out


class CrossModalFusion(nn.Module):
    """Reflectance queries attend to event keys/values; residual output."""

    def __init__(self, channels: int, depth: int = 4):
        super().__init__()
        self.q_proj = Projection(channels)
        self.k_proj = Projection(channels)
        self.v_proj = Projection(channels)
        self.dce = DynamicContrastExtractor(channels, depth)
        self.temperature = nn.Parameter(torch.ones(1))
        self.out = zero_init(conv(channels, channels, 1))

    def project_qkv(self, f_r, f_e):
        if f_r.shape != f_e.shape:
            raise InvalidInputError(
                f"reflectance {tuple(f_r.shape)} and event {tuple(f_e.shape)} features differ")
        return self.q_proj(f_r), self.k_proj(f_e), self.v_proj(f_e)

    def forward(self, f_r, f_e):
        n, c, h, w = f_r.shape
        q, k, v = self.project_qkv(f_r, f_e)
        kv = self.dce(k, v)
        fused = dynamic_cross_attention(q.view(n, c, h * w), kv, self.temperature)
        return f_r + self.out(fused.view(n, c, h, w))


class ConcatFusion(nn.Module):
    """Attention-free fusion: concatenation and convolutions."""

    def __init__(self, channels: int):
        super().__init__()
        self.mix = conv(2 * channels, channels, 1)
        self.act = nn.LeakyReLU(0.1)
        self.out = zero_init(conv(channels, channels, 1))

    def forward(self, f_r, f_e):
        if f_r.shape != f_e.shape:
            raise InvalidInputError(
                f"reflectance {tuple(f_r.shape)} and event {tuple(f_e.shape)} features differ")
        return f_r + self.out(self.act(self.mix(torch.cat([f_r, f_e], 1))))


class ERE(nn.Module):
    """Encoder-bottleneck-decoder over reflectance features.

    Args:
        channels (int): Feature width C.
        depth (int): Temporal slices D of the dynamic keys/values.
        attention (bool): Use cross-modal attention; otherwise concat fusion.
        multiscale (bool): Fuse events at bottleneck and both decoder stages;
            if False only the full-resolution decoder stage sees events.
    """

    def __init__(self, channels: int = 32, depth: int = 4, attention: bool = True,
                 multiscale: bool = True):
        super().__init__()
        self.multiscale = multiscale
        self.merge = conv(2 * channels, channels)
        self.enc1 = Downsample(channels)
        self.enc2 = Downsample(channels)
        self.bottleneck = ResidualBlock(channels)
        self.dec1 = Upsample(channels)
        self.skip1 = conv(2 * channels, channels, 1)
        self.dec2 = Upsample(channels)
        self.skip2 = conv(2 * channels, channels, 1)
        self.tail = conv(channels, channels)
        self.act = nn.LeakyReLU(0.1)

        def fusion():
            return CrossModalFusion(channels, depth) if attention else ConcatFusion(channels)

        stages = 3 if multiscale else 1
        self.fusions = nn.ModuleList(fusion() for _ in range(stages))

    def forward(self, f_r, h_prev, events: MultiScaleEventFeatures):
        if f_r.shape != h_prev.shape:
            raise InvalidInputError(
                f"reflectance {tuple(f_r.shape)} and temporal {tuple(h_prev.shape)} features differ")
        h, w = f_r.shape[-2:]
        if h % 4 or w % 4:
            raise InvalidInputError(f"spatial size {h}x{w} must be divisible by 4")
        expected = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
        for name, feat, size in zip(("s1", "s2", "s3"), events, expected):
            if tuple(feat.shape[-2:]) != size:
                raise InvalidInputError(
                    f"event scale {name} has size {tuple(feat.shape[-2:])}, expected {size}")

        x0 = self.act(self.merge(torch.cat([f_r, h_prev], 1)))
        e1 = self.enc1(x0)
        b = self.bottleneck(self.enc2(e1))
        if self.multiscale:
            b = self.fusions[0](b, events.s3)
        d1 = self.act(self.skip1(torch.cat([self.dec1(b), e1], 1)))
        if self.multiscale:
            d1 = self.fusions[1](d1, events.s2)
        d2 = self.act(self.skip2(torch.cat([self.dec2(d1), x0], 1)))
        d2 = self.fusions[-1](d2, events.s1)
        return f_r + self.tail(d2)


class PlainReflectanceBlock(nn.Module):
    """Stand-in for ERE without event guidance; keeps the recurrent input."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.merge = conv(2 * channels, channels)
        self.blocks = nn.Sequential(ResidualBlock(channels), ResidualBlock(channels))
        self.tail = conv(channels, channels)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, f_r, h_prev, events=None):
        x = self.act(self.merge(torch.cat([f_r, h_prev], 1)))
        return f_r + self.tail(self.blocks(x))


def project_qkv(f_r, f_e, params: CrossModalFusion):
    """Return (Q, K, V) each flattened to (n, C, N)."""
    n, c = f_r.shape[:2]
    return tuple(t.reshape(n, c, -1) for t in params.project_qkv(f_r, f_e))


def dce(f_e, params: DynamicContrastExtractor) -> DynamicKV:
    return params(f_e)


def ere_forward(f_r, h_prev, events, params: ERE):
    return params(f_r, h_prev, events)
