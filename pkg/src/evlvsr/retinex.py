"""Learnable Retinex decomposition ``X = R * I``.

The estimator predicts a correction in logit space on top of the per-pixel
channel maximum, a classic illumination initialization. With the correction
at zero the illumination equals the channel maximum, so reflectance stays in
[0, 1] and the decomposition is exactly invertible.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidInputError
from .layers import conv, scale_init

ILLUMINATION_FLOOR = 1e-3
REFLECTANCE_MAX = 4.0


@dataclass
class RetinexPair:
    """Illumination (N, 1, H, W) in [floor, 1] and reflectance (N, 3, H, W)."""

    illumination: torch.Tensor
    reflectance: torch.Tensor


class IlluminationEstimator(nn.Module):
    """Three-layer conv net (3 -> C -> C -> 1) producing a map in (0, 1]."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.conv1 = conv(3, channels)
        self.conv2 = conv(channels, channels)
        self.conv3 = conv(channels, 1)
        self.act = nn.LeakyReLU(0.1)
        scale_init(self, 1.0)
        scale_init(self.conv3, 0.1)

    def forward(self, x):
        base = x.amax(dim=1, keepdim=True).clamp(ILLUMINATION_FLOOR, 1 - ILLUMINATION_FLOOR)
        prior = torch.log(base) - torch.log1p(-base)
        residual = self.conv3(self.act(self.conv2(self.act(self.conv1(x)))))
        return torch.sigmoid(prior + residual)


class IlluminationCurve(nn.Module):
    """Global brightening ``min(gain * I ** exponent, 1)`` with two learned scalars.

    Re-lighting the reflectance with the curved illumination gives a
    brightened frame that the network refines.
    """

    def __init__(self, exponent: float = 0.5, gain: float = 1.0):
        super().__init__()
        self.log_exponent = nn.Parameter(torch.tensor(float(exponent)).log())
        self.log_gain = nn.Parameter(torch.tensor(float(gain)).log())

    def forward(self, illumination):
        curve = self.log_gain.exp() * illumination.pow(self.log_exponent.exp())
        return curve.clamp(max=1.0)


def _check_frame(x):
    if x.ndim != 4 or x.shape[1] != 3:
        raise InvalidInputError(f"expected frames of shape (N, 3, H, W), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("frame contains non-finite values")


def estimate_illumination(x, estimator) -> torch.Tensor:
    """Illumination map (N, 1, H, W) clamped below at ``ILLUMINATION_FLOOR``."""
    _check_frame(x)
    return estimator(x).clamp(ILLUMINATION_FLOOR, 1.0)


def decompose(x, estimator) -> RetinexPair:
    illum = estimate_illumination(x, estimator)
    refl = (x / illum).clamp(0.0, REFLECTANCE_MAX)
    return RetinexPair(illum, refl)


def recompose(pair: RetinexPair) -> torch.Tensor:
    illum, refl = pair.illumination, pair.reflectance
    if (illum.ndim != 4 or refl.ndim != 4 or illum.shape[1] != 1
            or illum.shape[0] != refl.shape[0] or illum.shape[2:] != refl.shape[2:]):
        raise InvalidInputError(
            f"cannot recompose reflectance {tuple(refl.shape)} with "
            f"illumination {tuple(illum.shape)}")
    return (refl * illum).clamp(0.0, 1.0)
