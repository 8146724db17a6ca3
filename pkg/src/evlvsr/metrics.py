"""PSNR, SSIM and the flow-based temporal consistency metric (tOF)."""

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np
import torch
from torch.nn import functional as F

from .errors import InvalidInputError

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
TOF_FLOW_RESOURCE = "tof_flow.evsr"


def _as_array(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@lru_cache(maxsize=4)
def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return torch.from_numpy(np.outer(g, g))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), channels averaged.

    Args:
        a, b: Images of shape (H, W) or (C, H, W).
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise InvalidInputError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    win = _gaussian_window()[None, None]
    x = torch.from_numpy(a)[:, None]
    y = torch.from_numpy(b)[:, None]

    def filt(t):
        return F.conv2d(t, win)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


@lru_cache(maxsize=1)
def load_tof_flow():
    """The frozen flow estimator used by :func:`tof` (shipped with the package)."""
    from .checkpoint import load_checkpoint
    from .flow import FlowEstimator

    ref = resources.files("evlvsr").joinpath("data", TOF_FLOW_RESOURCE)
    with resources.as_file(ref) as path:
        ckpt = load_checkpoint(path)
    net = FlowEstimator(ckpt.config["in_channels"], ckpt.config["levels"],
                        ckpt.config["hidden"])
    net.load_state_dict(ckpt.model_state)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _seq_tensor(seq):
    if isinstance(seq, torch.Tensor):
        return seq.detach().float().cpu()
    return torch.from_numpy(np.ascontiguousarray(np.asarray(seq, dtype=np.float32)))


@torch.no_grad()
def tof(pred_seq, gt_seq, flow_estimator=None) -> float:
    """Mean absolute difference between flows of predicted and true frame pairs.

    ``mean_t mean|flow(pred_t, pred_t+1) - flow(gt_t, gt_t+1)|``

    Args:
        pred_seq, gt_seq: Sequences of frames (T, 3, H, W).
        flow_estimator: Frozen flow network; defaults to the packaged one.
    """
    if len(pred_seq) != len(gt_seq):
        raise InvalidInputError(f"sequence lengths differ: {len(pred_seq)} vs {len(gt_seq)}")
    if len(pred_seq) < 2:
        raise InvalidInputError("tOF needs at least two frames")
    net = flow_estimator if flow_estimator is not None else load_tof_flow()
    pred, gt = _seq_tensor(pred_seq), _seq_tensor(gt_seq)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    both = torch.cat([pred, gt])
    t = len(pred)
    src = torch.cat([both[:t - 1], both[t:2 * t - 1]])
    dst = torch.cat([both[1:t], both[t + 1:]])
    flows = net(src, dst)
    diff = (flows[:t - 1] - flows[t - 1:]).abs().mean(dim=(1, 2, 3))
    return float(diff.double().mean())


@dataclass
class MetricReport:
    clip_id: str
    method_id: str
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    tof: float = 0.0

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def to_record(self):
        """JSON-safe record; infinite PSNR becomes the string ``"inf"``."""
        def enc(v):
            return "inf" if v == math.inf else v

        rec = asdict(self)
        rec["psnr"] = [enc(v) for v in self.psnr]
        rec["mean_psnr"] = enc(self.mean_psnr)
        rec["mean_ssim"] = self.mean_ssim
        return rec


def evaluate_clip(pred_seq, gt_seq, clip_id="clip", method_id="method", flow_estimator=None):
    pred, gt = _seq_tensor(pred_seq).numpy(), _seq_tensor(gt_seq).numpy()
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return MetricReport(
        clip_id, method_id,
        psnr=[psnr(p, g) for p, g in zip(pred, gt)],
        ssim=[ssim(p, g) for p, g in zip(pred, gt)],
        tof=tof(pred, gt, flow_estimator),
    )


def format_table(reports) -> str:
    """Plain-text table: one row per clip plus the mean row."""
    def fmt(v, digits):
        return "inf" if v == math.inf else f"{v:.{digits}f}"

    lines = [f"{'clip':<16}{'method':<14}{'PSNR':>10}{'SSIM':>10}{'tOF':>10}"]
    for r in reports:
        lines.append(f"{r.clip_id:<16}{r.method_id:<14}{fmt(r.mean_psnr, 2):>10}"
                     f"{fmt(r.mean_ssim, 4):>10}{fmt(r.tof, 3):>10}")
    if reports:
        mp = float(np.mean([r.mean_psnr for r in reports]))
        ms = float(np.mean([r.mean_ssim for r in reports]))
        mt = float(np.mean([r.tof for r in reports]))
        lines.append(f"{'mean':<16}{'':<14}{fmt(mp, 2):>10}{fmt(ms, 4):>10}{fmt(mt, 3):>10}")
    return "\n".join(lines)
