"""Separable bicubic resampling (Catmull-Rom, a = -0.5).

Downscaling widens the kernel by the scale factor (antialiasing, as in
MATLAB ``imresize``); out-of-range taps replicate the edge pixel. Resizing is
expressed as ``Wh @ x @ Ww.T`` with cached interpolation matrices, so the same
code path serves numpy arrays and differentiable torch tensors.
"""

from functools import lru_cache

import numpy as np
import torch

from .errors import InvalidInputError

CUBIC_A = -0.5


def cubic_kernel(x, a=CUBIC_A):
    """Keys cubic convolution kernel evaluated elementwise."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def _weights(in_size: int, out_size: int) -> np.ndarray:
    scale = out_size / in_size
    # kernel stretched by 1/scale when shrinking
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        lo = int(np.floor(center - support))
        hi = int(np.ceil(center + support))
        taps = np.arange(lo, hi + 1)
        w = stretch * cubic_kernel(stretch * (center - taps))
        np.add.at(mat[i], np.clip(taps, 0, in_size - 1), w)
    mat /= mat.sum(axis=1, keepdims=True)
    mat.setflags(write=False)
    return mat


def resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Return the (out_size, in_size) bicubic interpolation matrix."""
    if in_size < 1 or out_size < 1:
        raise InvalidInputError(f"sizes must be positive, got {in_size}->{out_size}")
    return _weights(int(in_size), int(out_size))


def imresize(x, out_hw):
    """Bicubic-resize the last two axes of ``x`` to ``out_hw``.

    Args:
        x (np.ndarray | torch.Tensor): Array of shape (..., H, W).
        out_hw (tuple[int, int]): Target (H', W').

    Returns:
        Resized array of the same type; gradients flow through torch inputs.
    """
    h, w = x.shape[-2:]
    oh, ow = out_hw
    wh = resize_matrix(h, oh)
    ww = resize_matrix(w, ow)
    if isinstance(x, torch.Tensor):
        wh_t = torch.tensor(wh, dtype=x.dtype, device=x.device)
        ww_t = torch.tensor(ww, dtype=x.dtype, device=x.device)
        return wh_t @ x @ ww_t.T
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    out = wh @ x.astype(np.float64) @ ww.T
    return out.astype(dtype)


def downscale(x, factor: int = 4):
    """Bicubic downscale by an integer factor; H and W must be divisible."""
    h, w = x.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise InvalidInputError(
            f"spatial size {h}x{w} is not divisible by factor {factor}")
    return imresize(x, (h // factor, w // factor))


def upscale(x, factor: int = 4):
    """Bicubic upscale by an integer factor."""
    h, w = x.shape[-2:]
    return imresize(x, (h * factor, w * factor))
