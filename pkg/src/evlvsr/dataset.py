"""Loading generated clips from a manifest for training and evaluation."""

import json
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInputError
from .events import load_voxel, normalize_voxel
from .synthdata import load_png


def resolve_manifest(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def load_manifest(path):
    path = resolve_manifest(path)
    return json.loads(path.read_text()), path.parent


def load_clip(manifest_clip, root, with_targets=True):
    """Return (frames, voxels, targets) float32 tensors of shape (T, C, H, W)."""
    root = Path(root)
    frames = np.stack([load_png(root / p) for p in manifest_clip["lr"]])
    voxels = np.stack([normalize_voxel(load_voxel(root / p).data)
                       for p in manifest_clip["voxels"]])
    targets = None
    if with_targets:
        targets = torch.from_numpy(np.stack([load_png(root / p) for p in manifest_clip["hr"]]))
    return torch.from_numpy(frames), torch.from_numpy(voxels), targets


class ClipDataset:
    """All clips of a manifest held in memory.

    Args:
        manifest_path: Manifest file or the directory containing it.
        clip_ids (list[str] | None): Subset of clips to use.
    """

    def __init__(self, manifest_path, clip_ids=None):
        self.manifest, self.root = load_manifest(manifest_path)
        entries = self.manifest["clips"]
        if clip_ids is not None:
            wanted = set(clip_ids)
            entries = [c for c in entries if c["id"] in wanted]
        if not entries:
            raise InvalidInputError("dataset contains no clips")
        self.entries = entries
        self.clips = [load_clip(c, self.root) for c in entries]

    def __len__(self):
        return len(self.clips)

    @property
    def ids(self):
        return [c["id"] for c in self.entries]

    def sample_batch(self, rng, cfg):
        """Draw ``cfg.batch_size`` augmented clip windows of ``cfg.clip_length``."""
        from .train import augment

        frames, voxels, targets = [], [], []
        for _ in range(cfg.batch_size):
            f, v, y = self.clips[int(rng.integers(len(self.clips)))]
            t = f.shape[0]
            if cfg.clip_length > t:
                raise InvalidInputError(f"clip_length {cfg.clip_length} exceeds clip length {t}")
            s = int(rng.integers(t - cfg.clip_length + 1))
            sl = slice(s, s + cfg.clip_length)
            f, v, y = augment(f[sl], v[sl], y[sl], rng, cfg)
            frames.append(f)
            voxels.append(v)
            targets.append(y)
        return torch.stack(frames), torch.stack(voxels), torch.stack(targets)
