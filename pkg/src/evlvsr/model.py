"""Bidirectional recurrent low-light event VSR network."""

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

import torch
from torch import nn

from .ere import ERE, PlainReflectanceBlock
from .errors import InvalidInputError
from .flow import FlowEstimator, warp
from .iee import IEE, PYRAMID_LEVELS
from .layers import PixelShuffleUp, ResidualBlock, conv
from .resize import upscale
from .retinex import IlluminationCurve, IlluminationEstimator, decompose


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    scale_factor: int = 4
    iee_scales: int = 3
    flow_source: str = "reflectance"
    attention_fusion: bool = True
    r_embed_blocks: int = 5
    use_iee: bool = True
    use_ere: bool = True
    ere_multiscale: bool = True
    voxel_bins: int = 5
    attention_depth: int = 4
    flow_levels: int = 3
    retinex_channels: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.scale_factor != 4:
            raise InvalidInputError("only scale_factor=4 is supported")
        if self.iee_scales not in (1, 2, 3):
            raise InvalidInputError(f"iee_scales must be 1, 2 or 3, got {self.iee_scales}")
        if self.flow_source not in ("reflectance", "raw"):
            raise InvalidInputError(f"flow_source must be 'reflectance' or 'raw', got {self.flow_source!r}")
        if self.channels < 1 or self.attention_depth < 1:
            raise InvalidInputError("channels and attention_depth must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


ABLATIONS = {
    "full": {},
    "wo-iee": {"use_iee": False},
    "wo-ere": {"use_ere": False},
    "iee-scale-1": {"iee_scales": 1},
    "iee-scale-2": {"iee_scales": 2},
    "single-scale-ere": {"ere_multiscale": False},
    "no-fusion": {"attention_fusion": False},
    "flow-from-raw": {"flow_source": "raw"},
}


def ablation_config(name: str, base: ModelConfig = None) -> ModelConfig:
    if name not in ABLATIONS:
        raise InvalidInputError(
            f"unknown ablation {name!r}; valid names: {', '.join(ABLATIONS)}")
    return replace(base or ModelConfig(), **ABLATIONS[name])


class REmbed(nn.Module):
    """Stem convolution plus residual blocks over the reflectance map."""

    def __init__(self, channels: int = 32, num_blocks: int = 5):
        super().__init__()
        self.stem = conv(3, channels)
        self.blocks = nn.Sequential(*[ResidualBlock(channels) for _ in range(num_blocks)])

    def forward(self, reflectance):
        return self.blocks(self.stem(reflectance))


class UpsampleHead(nn.Module):
    """Fuses per-frame features and upsamples them 4x to an RGB residual."""

    def __init__(self, channels: int = 32, num_inputs: int = 4):
        super().__init__()
        self.fuse = conv(num_inputs * channels, channels)
        self.up1 = PixelShuffleUp(channels)
        self.up2 = PixelShuffleUp(channels)
        self.hr = conv(channels, channels)
        self.last = conv(channels, 3)
        self.act = nn.LeakyReLU(0.1)

    def forward(self, *feats):
        x = self.act(self.fuse(torch.cat(feats, 1)))
        x = self.up2(self.up1(x))
        return self.last(self.act(self.hr(x)))


class LowLightEventVSR(nn.Module):
    """Maps low-light LR frames plus event voxels to well-lit 4x frames.

    Each frame is split into illumination and reflectance. Illumination guides
    the event features (IEE), the event features enrich reflectance features
    (ERE) inside a backward and a forward recurrent pass aligned by flow
    between reflectance maps, and an upsampling head fuses everything.
    """

    def __init__(self, cfg: ModelConfig = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c = cfg.channels
        self.retinex = IlluminationEstimator(cfg.retinex_channels)
        self.flow = FlowEstimator(3, cfg.flow_levels)
        self.iee = IEE(c, cfg.voxel_bins, cfg.iee_scales, guided=cfg.use_iee)
        self.r_embed = REmbed(c, cfg.r_embed_blocks)
        if cfg.use_ere:
            make = lambda: ERE(c, cfg.attention_depth, cfg.attention_fusion, cfg.ere_multiscale)
        else:
            make = lambda: PlainReflectanceBlock(c)
        self.ere_backward = make()
        self.ere_forward = make()
        self.head = UpsampleHead(c)
        self.relight = IlluminationCurve()

    def aux_parameters(self):
        """Parameters of the flow and illumination estimators."""
        return list(self.flow.parameters()) + list(self.retinex.parameters())

    def main_parameters(self):
        aux = {id(p) for p in self.aux_parameters()}
        return [p for p in self.parameters() if id(p) not in aux]

    def compute_flows(self, x):
        """Flows between neighbours of ``x`` (n, t, c, h, w).

        Returns:
            (backward, forward): each (n, t-1, 2, h, w). ``backward[:, i]``
            aligns frame i+1 to frame i; ``forward[:, i]`` aligns i to i+1.
        """
        n, t, c, h, w = x.shape
        prev = x[:, :-1].reshape(-1, c, h, w)
        nxt = x[:, 1:].reshape(-1, c, h, w)
        flows = self.flow(torch.cat([prev, nxt]), torch.cat([nxt, prev]))
        flows = flows.view(2, n, t - 1, 2, h, w)
        return flows[0], flows[1]

    def propagate(self, feats, events, flows, direction):
        """Run one recurrent pass and return the per-frame states.

        Args:
            feats (Tensor): Reflectance features (n, t, C, h, w).
            events (list[MultiScaleEventFeatures]): Per-frame event features.
            flows (Tensor): (n, t-1, 2, h, w) as returned by ``compute_flows``.
            direction (str): 'backward' or 'forward'.
        """
        n, t = feats.shape[:2]
        if direction == "backward":
            order, block = range(t - 1, -1, -1), self.ere_backward
        else:
            order, block = range(t), self.ere_forward
        states = [None] * t
        h = feats.new_zeros(feats[:, 0].shape)
        for i, idx in enumerate(order):
            if i > 0:
                flow = flows[:, idx] if direction == "backward" else flows[:, idx - 1]
                h = warp(h, flow)
            h = block(feats[:, idx], h, events[idx])
            states[idx] = h
        return torch.stack(states, 1)

    def forward(self, frames, voxels, return_features=False):
        """Args:
            frames (Tensor): Low-light LR frames (n, t, 3, h, w) in [0, 1].
            voxels (Tensor): Event voxels (n, t, B, h, w).

        Returns:
            Tensor: Super-resolved frames (n, t, 3, 4h, 4w) in [0, 1].
        """
        if frames.ndim != 5 or frames.shape[2] != 3:
            raise InvalidInputError(f"frames must be (n, t, 3, h, w), got {tuple(frames.shape)}")
        n, t, _, h, w = frames.shape
        if voxels.ndim != 5 or voxels.shape[:2] != (n, t):
            raise InvalidInputError(
                f"voxels {tuple(voxels.shape)} do not match frames {tuple(frames.shape)}")
        if voxels.shape[2] != self.cfg.voxel_bins or voxels.shape[3:] != (h, w):
            raise InvalidInputError(
                f"voxels must be (n, t, {self.cfg.voxel_bins}, {h}, {w}), got {tuple(voxels.shape)}")
        if t < 2:
            raise InvalidInputError("need at least two frames")
        div = 2 ** (PYRAMID_LEVELS - 1)
        if h % div or w % div:
            raise InvalidInputError(f"spatial size {h}x{w} must be divisible by {div}")

        flat = frames.reshape(n * t, 3, h, w)
        pair = decompose(flat, self.retinex)
        f_r = self.r_embed(pair.reflectance)
        ev, f_i, f_e = self.iee(pair.illumination, voxels.reshape(n * t, -1, h, w),
                                return_shallow=True)
        c = f_r.shape[1]

        flow_in = pair.reflectance if self.cfg.flow_source == "reflectance" else flat
        flows_b, flows_f = self.compute_flows(flow_in.view(n, t, 3, h, w))

        per_frame = [type(ev)(*(s.view(n, t, *s.shape[1:])[:, i] for s in ev))
                     for i in range(t)]
        feats = f_r.view(n, t, c, h, w)
        back = self.propagate(feats, per_frame, flows_b, "backward")
        fwd = self.propagate(feats, per_frame, flows_f, "forward")

        residual = self.head(fwd.reshape(n * t, c, h, w), back.reshape(n * t, c, h, w),
                             f_i, ev.s1)
        lit = (pair.reflectance * self.relight(pair.illumination)).clamp(0.0, 1.0)
        base = upscale(lit, self.cfg.scale_factor)
        out = (residual + base).clamp(0.0, 1.0).view(n, t, 3, 4 * h, 4 * w)
        if return_features:
            return out, {"pair": pair, "lit": lit, "events": ev, "f_i": f_i, "f_e": f_e,
                         "backward": back, "forward": fwd,
                         "flows_backward": flows_b, "flows_forward": flows_f}
        return out


def build_model(cfg: ModelConfig = None) -> LowLightEventVSR:
    """Construct the network with parameters drawn from ``cfg.seed``."""
    cfg = cfg or ModelConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return LowLightEventVSR(cfg)


def forward_sequence(frames, voxels, model: LowLightEventVSR):
    return model(frames, voxels)


def r_embed(reflectance, params: REmbed):
    return params(reflectance)
