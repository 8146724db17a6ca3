"""Training loop: Charbonnier loss, flips, cosine schedule, staged aux lr."""

import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .errors import InvalidInputError, TrainingDiverged
from .metrics import psnr

CHARBONNIER_EPS = 1e-12


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 2
    clip_length: int = 5
    crop_size: int = 32
    lr_main: float = 2e-4
    lr_aux: float = 2.5e-5
    aux_freeze_steps: int = 100
    lr_floor: float = 1e-7
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    grad_clip: float = 10.0
    eval_every: int = 100
    ckpt_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.lr_main <= 0 or self.lr_aux <= 0:
            raise InvalidInputError("learning rates must be positive")
        if not 0 <= self.aux_freeze_steps <= self.total_steps:
            raise InvalidInputError("aux_freeze_steps must lie in [0, total_steps]")
        if self.batch_size < 1 or self.clip_length < 2 or self.crop_size < 8:
            raise InvalidInputError("batch_size >= 1, clip_length >= 2, crop_size >= 8 required")

    @classmethod
    def reference_recipe(cls, **overrides):
        """Full-scale recipe: 300K steps, batch 8, 15 frames, 64x64 crops."""
        base = dict(total_steps=300_000, batch_size=8, clip_length=15, crop_size=64,
                    aux_freeze_steps=5000)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def charbonnier_loss(pred, target, eps: float = CHARBONNIER_EPS):
    """Per-frame Charbonnier penalty averaged over frames.

    ``mean_t sqrt(||target_t - pred_t||^2 + eps^2)`` where the norm is the sum
    of squared differences over one frame.

    Args:
        pred, target (Tensor): Shape (..., t, c, h, w); leading axes are batch.
    """
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if pred.ndim < 4:
        raise InvalidInputError("expected (..., t, c, h, w) tensors")
    sq = (target - pred).pow(2).sum(dim=(-3, -2, -1))
    return torch.sqrt(sq + eps * eps).mean()


def center_crop(x, size, factor=1):
    h, w = x.shape[-2:]
    s = size * factor
    if s > h or s > w:
        raise InvalidInputError(f"crop {s} larger than input {h}x{w}")
    top, left = (h - s) // 2, (w - s) // 2
    return x[..., top:top + s, left:left + s]


def augment(frames, voxels, targets, rng, cfg: TrainConfig):
    """Center-crop and randomly flip a clip; one flip draw for all tensors.

    Args:
        frames (Tensor): LR frames (..., h, w).
        voxels (Tensor): LR voxels aligned with ``frames``.
        targets (Tensor | None): HR targets, 4x the LR size.
        rng (np.random.Generator): Source of the flip decisions.
    """
    if frames.shape[-2:] != voxels.shape[-2:]:
        raise InvalidInputError("frames and voxels are not spatially aligned")
    frames = center_crop(frames, cfg.crop_size)
    voxels = center_crop(voxels, cfg.crop_size)
    if targets is not None:
        targets = center_crop(targets, cfg.crop_size, factor=4)
    hflip = rng.random() < cfg.hflip_prob
    vflip = rng.random() < cfg.vflip_prob
    dims = [d for d, flag in ((-1, hflip), (-2, vflip)) if flag]
    if dims:
        frames = frames.flip(dims)
        voxels = voxels.flip(dims)
        if targets is not None:
            targets = targets.flip(dims)
    return frames, voxels, targets


def cosine_lr(step, total, base, floor):
    if total <= 0:
        return base
    progress = min(max(step / total, 0.0), 1.0)
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam([
        {"params": model.main_parameters(), "lr": cfg.lr_main, "name": "main"},
        {"params": model.aux_parameters(), "lr": cfg.lr_aux, "name": "aux"},
    ], betas=(0.9, 0.999))


def set_learning_rates(optimizer, step, cfg: TrainConfig):
    lr_main = cosine_lr(step, cfg.total_steps, cfg.lr_main, cfg.lr_floor)
    lr_aux = cosine_lr(step, cfg.total_steps, cfg.lr_aux, cfg.lr_floor)
    if step < cfg.aux_freeze_steps:
        lr_aux = 0.0
    for group in optimizer.param_groups:
        group["lr"] = lr_main if group["name"] == "main" else lr_aux
    return lr_main, lr_aux


def train_step(model, optimizer, batch, cfg: TrainConfig, step: int):
    """One optimization step; returns (loss, lr_main, lr_aux)."""
    frames, voxels, targets = batch
    lr_main, lr_aux = set_learning_rates(optimizer, step, cfg)
    model.train()
    pred = model(frames, voxels)
    loss = charbonnier_loss(pred, targets)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss at step {step}",
                               {"step": step, "loss": float(loss.detach()), "lr_main": lr_main,
                                "lr_aux": lr_aux, "error": "non-finite loss"})
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return float(loss.detach()), lr_main, lr_aux


@torch.no_grad()
def evaluate_psnr(model, clip):
    """Mean PSNR of the model on one (frames, voxels, targets) clip."""
    frames, voxels, targets = clip
    was_training = model.training
    model.eval()
    pred = model(frames[None], voxels[None])[0]
    model.train(was_training)
    return float(np.mean([psnr(p.numpy(), g.numpy()) for p, g in zip(pred, targets)]))


class _Writer:
    def __init__(self, out_dir):
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._full = open(self.out_dir / "train_log.jsonl", "w")
            self._loss = open(self.out_dir / "loss_log.jsonl", "w")

    def write(self, record):
        if not self.out_dir:
            return
        self._full.write(json.dumps(record, sort_keys=True) + "\n")
        stable = {k: v for k, v in record.items() if k != "wall_time"}
        self._loss.write(json.dumps(stable, sort_keys=True) + "\n")
        self._full.flush()
        self._loss.flush()

    def close(self):
        if self.out_dir:
            self._full.close()
            self._loss.close()


def make_checkpoint(model, optimizer, step, meta=None):
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(state, model.cfg.to_dict(), step,
                      optimizer.state_dict() if optimizer is not None else None,
                      dict(meta or {}))


def train_loop(dataset, cfg: TrainConfig, model, out_dir=None, eval_clip=None,
               callback=None):
    """Train ``model`` on clips drawn from ``dataset``.

    Records (step, loss, lr_main, lr_aux, wall_time, optional eval_psnr) are
    written to ``train_log.jsonl``; the same records without wall time go to
    ``loss_log.jsonl`` so reruns can be compared byte for byte.

    Args:
        dataset: Object with ``sample_batch(rng, cfg)`` returning
            (frames, voxels, targets) tensors.
        cfg (TrainConfig): Optimization settings.
        model (LowLightEventVSR): Network to train in place.
        out_dir (str | Path | None): Where logs and checkpoints go.
        eval_clip: Held-out (frames, voxels, targets) for periodic PSNR.
        callback: Called as ``callback(record)`` after every step; a truthy
            return value ends training early.

    Returns:
        (Checkpoint, list[dict]): Final checkpoint and all log records.

    Raises:
        TrainingDiverged: On a non-finite loss; the last interval checkpoint
            on disk is left untouched.
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = build_optimizer(model, cfg)
    writer = _Writer(out_dir)
    ckpt_path = Path(out_dir) / "checkpoint.evsr" if out_dir else None
    meta = {"train_config": cfg.to_dict()}
    records = []
    start = time.perf_counter()
    try:
        for step in range(cfg.total_steps):
            batch = dataset.sample_batch(rng, cfg)
            try:
                loss, lr_main, lr_aux = train_step(model, optimizer, batch, cfg, step)
            except TrainingDiverged as exc:
                writer.write(exc.record)
                raise
            record = {"step": step, "loss": loss, "lr_main": lr_main, "lr_aux": lr_aux,
                      "wall_time": time.perf_counter() - start}
            if eval_clip is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                record["eval_psnr"] = evaluate_psnr(model, eval_clip)
            records.append(record)
            writer.write(record)
            if ckpt_path and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
                save_checkpoint(make_checkpoint(model, optimizer, step + 1, meta), ckpt_path)
            if callback is not None and callback(record):
                break
        ckpt = make_checkpoint(model, optimizer, len(records), meta)
        if ckpt_path:
            save_checkpoint(ckpt, ckpt_path)
        return ckpt, records
    finally:
        writer.close()
