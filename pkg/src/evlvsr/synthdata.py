"""Procedural paired clips: well-lit HR video, low-light LR video and events.

A clip is a periodic background plus textured rectangular sprites, each layer
translating at constant velocity. Layers are sampled bilinearly so motion is
sub-pixel accurate. Events are simulated from densely resampled low-light
frames at HR resolution, voxelized per frame and bicubic-downsampled 4x.
"""

import hashlib
import json
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .events import (EventSimConfig, downsample_voxel, save_voxel, simulate_events,
                     voxelize, write_events)
from .resize import downscale, imresize

TEXTURES = ("checker", "gradient", "noise")
FRAME_PERIOD_US = 40_000
LUMA = np.array([0.299, 0.587, 0.114])
MAX_SPEED = 8.0


@dataclass
class SceneConfig:
    height: int = 128
    width: int = 128
    num_sprites: int = 4
    sprite_size: tuple = None
    textures: tuple = TEXTURES
    max_speed: float = 3.0
    velocities: list = None
    background_velocity: tuple = None
    frames: int = 5
    supersample: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.frames < 2:
            raise InvalidInputError("a clip needs at least two frames")
        if self.supersample < 1:
            raise InvalidInputError("supersample must be >= 1")
        if self.max_speed > MAX_SPEED:
            raise InvalidInputError(f"max_speed is capped at {MAX_SPEED} px/frame")
        if self.sprite_size is None:
            # 16 to 40 px on a 128 px canvas, scaled with the canvas
            side = min(self.height, self.width)
            self.sprite_size = (max(1, side // 8), max(1, side * 5 // 16))
        lo, hi = self.sprite_size
        if hi > min(self.height, self.width) or lo < 1 or lo > hi:
            raise InvalidInputError(
                f"sprite size {self.sprite_size} does not fit a {self.height}x{self.width} canvas")
        vels = list(self.velocities or []) + [self.background_velocity or (0, 0)]
        if any(np.hypot(*v) > MAX_SPEED for v in vels):
            raise InvalidInputError(f"velocities must not exceed {MAX_SPEED} px/frame")
        unknown = set(self.textures) - set(TEXTURES)
        if unknown:
            raise InvalidInputError(f"unknown textures {sorted(unknown)}")


@dataclass
class DegradeConfig:
    """Low-light photometry ``(alpha * x) ** gamma + noise`` then 4x bicubic."""

    alpha: float = 0.35
    gamma: float = 1.4
    noise_sigma: float = 0.01
    factor: int = 4

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise InvalidInputError("alpha must lie in (0, 1]")
        if self.gamma < 1:
            raise InvalidInputError("gamma must be >= 1")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")


@dataclass
class Layer:
    rgb: np.ndarray          # (3, h, w), premultiplied by alpha
    alpha: np.ndarray        # (h, w)
    origin: np.ndarray       # (x, y) of the top-left corner at time 0
    velocity: np.ndarray     # (vx, vy) px/frame
    periodic: bool = False


def _sample(img, xs, ys, periodic):
    """Bilinear lookup of ``img`` (..., h, w) at float coordinates."""
    h, w = img.shape[-2:]
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx, fy = xs - x0, ys - y0

    def at(yy, xx):
        if periodic:
            return img[..., yy % h, xx % w]
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = img[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return vals * ok

    return ((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1)))


def _texture(kind, h, w, rng):
    c1, c2 = rng.uniform(0.05, 1.0, size=(2, 3, 1, 1))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "checker":
        cell = int(rng.integers(2, 9))
        mask = ((yy // cell + xx // cell) % 2)[None]
    elif kind == "gradient":
        theta = rng.uniform(0, 2 * np.pi)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        mask = ((proj - proj.min()) / max(np.ptp(proj), 1e-9))[None]
    else:
        coarse = rng.random((3, max(h // 4, 2), max(w // 4, 2)))
        mask = np.clip(imresize(coarse, (h, w)), 0, 1)
    return c1 + (c2 - c1) * mask


def _background(h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.full((3, h, w), 0.5)
    for _ in range(4):
        fx, fy = rng.integers(1, 5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.04, 0.1, size=(3, 1, 1))
        img += amp * np.sin(2 * np.pi * (fx * xx / w + fy * yy / h) + phase)
    return np.clip(img, 0.05, 0.95)


def make_layers(cfg: SceneConfig):
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    bg_vel = cfg.background_velocity
    if bg_vel is None:
        bg_vel = rng.uniform(-1, 1, size=2) * min(cfg.max_speed, 1.0)
    layers = [Layer(_background(h, w, rng), np.ones((h, w)), np.zeros(2),
                    np.asarray(bg_vel, dtype=np.float64), periodic=True)]
    for i in range(cfg.num_sprites):
        sh, sw = rng.integers(cfg.sprite_size[0], cfg.sprite_size[1] + 1, size=2)
        kind = cfg.textures[int(rng.integers(len(cfg.textures)))]
        tex = _texture(kind, sh, sw, rng)
        origin = rng.uniform([-sw / 2, -sh / 2], [w - sw / 2, h - sh / 2])
        if cfg.velocities is not None:
            vel = np.asarray(cfg.velocities[i % len(cfg.velocities)], dtype=np.float64)
        else:
            speed = rng.uniform(0, cfg.max_speed)
            ang = rng.uniform(0, 2 * np.pi)
            vel = speed * np.array([np.cos(ang), np.sin(ang)])
        # 1 px transparent border gives anti-aliased edges under bilinear sampling
        alpha = np.pad(np.ones((sh, sw)), 1)
        rgb = np.pad(tex, ((0, 0), (1, 1), (1, 1))) * alpha
        layers.append(Layer(rgb, alpha, origin - 1, vel))
    return layers


def render_frame(layers, time, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    canvas = np.zeros((3, h, w))
    for layer in layers:
        ox, oy = layer.origin + layer.velocity * time
        xs, ys = xx - ox, yy - oy
        rgb = _sample(layer.rgb, xs, ys, layer.periodic)
        alpha = _sample(layer.alpha, xs, ys, layer.periodic)
        canvas = canvas * (1 - alpha) + rgb
    return np.clip(canvas, 0.0, 1.0)


def render_flow(layers, time, h, w):
    """Ground-truth flow (2, H, W) aligning the frame at ``time + 1`` to ``time``.

    Each pixel takes the velocity of the topmost layer covering it; occlusion
    boundaries are therefore only approximately right.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    flow = np.zeros((2, h, w))
    for layer in layers:
        ox, oy = layer.origin + layer.velocity * time
        alpha = _sample(layer.alpha, xx - ox, yy - oy, layer.periodic)
        flow[:, alpha > 0.5] = layer.velocity[:, None]
    return flow


def render_clip(cfg: SceneConfig):
    """Render a clip.

    Returns:
        dict with ``frames`` (T, 3, H, W) at integer times 0..T-1, and
        ``fine_frames`` / ``fine_times`` sampled every 1/supersample frame over
        [-0.5, T - 0.5] for event simulation (times in frame units).
    """
    layers = make_layers(cfg)
    h, w = cfg.height, cfg.width
    frames = np.stack([render_frame(layers, t, h, w) for t in range(cfg.frames)])
    n_fine = cfg.frames * cfg.supersample + 1
    fine_times = -0.5 + np.arange(n_fine) / cfg.supersample
    fine = np.stack([render_frame(layers, t, h, w) for t in fine_times])
    return {"frames": frames, "fine_frames": fine, "fine_times": fine_times}


def photometric(x, cfg: DegradeConfig):
    return np.power(cfg.alpha * np.asarray(x, dtype=np.float64), cfg.gamma)


def inverse_photometric(y, cfg: DegradeConfig):
    """Undo the low-light gain and gamma (noise is not removed)."""
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    return np.clip(np.power(y, 1.0 / cfg.gamma) / cfg.alpha, 0.0, 1.0)


def degrade(hr_frames, cfg: DegradeConfig, rng):
    """Low-light photometry plus read noise, clamp, then 4x bicubic downsample.

    The downsampled result is clamped to [0, 1] again since bicubic can
    overshoot.
    """
    hr = np.asarray(hr_frames, dtype=np.float64)
    h, w = hr.shape[-2:]
    if h % cfg.factor or w % cfg.factor:
        raise InvalidInputError(f"HR size {h}x{w} not divisible by {cfg.factor}")
    y = photometric(hr, cfg)
    if cfg.noise_sigma > 0:
        y = y + rng.normal(0.0, cfg.noise_sigma, size=y.shape)
    y = np.clip(y, 0.0, 1.0)
    return np.clip(downscale(y, cfg.factor), 0.0, 1.0)


def to_uint8(img):
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_png(path, img):
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def frame_windows_us(num_frames):
    """Per-frame event windows: frame t spans its neighbouring midpoints."""
    return [(t * FRAME_PERIOD_US, (t + 1) * FRAME_PERIOD_US) for t in range(num_frames)]


def _write_clip(clip_dir, clip_id, scene: SceneConfig, degrade_cfg, event_cfg, bins):
    rendered = render_clip(scene)
    hr = rendered["frames"]
    rng = np.random.default_rng([scene.seed, 1])
    lr = degrade(hr, degrade_cfg, rng)

    fine_low = photometric(rendered["fine_frames"], degrade_cfg)
    luma = np.tensordot(LUMA, fine_low, axes=([0], [1]))
    fine_us = np.rint((rendered["fine_times"] + 0.5) * FRAME_PERIOD_US).astype(np.int64)
    stream = simulate_events(luma, fine_us, event_cfg)

    for sub in ("hr", "lr", "voxels"):
        (clip_dir / sub).mkdir(parents=True)
    files = {"hr": [], "lr": [], "voxels": []}
    windows = frame_windows_us(scene.frames)
    for t in range(scene.frames):
        name = f"frame_{t:04d}"
        save_png(clip_dir / "hr" / f"{name}.png", hr[t])
        save_png(clip_dir / "lr" / f"{name}.png", lr[t])
        a, b = windows[t]
        window = stream.window(a, b, include_end=t == scene.frames - 1)
        grid = downsample_voxel(voxelize(window, bins), degrade_cfg.factor)
        save_voxel(clip_dir / "voxels" / f"{name}.npz", grid)
        for key, rel in (("hr", f"hr/{name}.png"), ("lr", f"lr/{name}.png"),
                         ("voxels", f"voxels/{name}.npz")):
            files[key].append(f"{clip_id}/{rel}")
    write_events(clip_dir / "events.evs", stream)
    files["events"] = f"{clip_id}/events.evs"
    return files, windows, len(stream)


def build_dataset(scene_cfgs, degrade_cfg: DegradeConfig, event_cfg: EventSimConfig,
                  out_dir, bins: int = 5):
    """Generate clips under ``out_dir`` and write ``manifest.json``.

    Each clip directory is written under a temporary name and renamed when
    complete. Returns the manifest dict.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    clips = []
    for i, scene in enumerate(scene_cfgs):
        clip_id = f"clip_{i:03d}"
        final = out_dir / clip_id
        tmp = out_dir / f".{clip_id}.tmp"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir()
        ev_cfg = EventSimConfig(event_cfg.contrast_threshold, event_cfg.log_eps,
                                event_cfg.noise_rate, event_cfg.seed + i)
        try:
            files, windows, n_events = _write_clip(tmp, clip_id, scene, degrade_cfg, ev_cfg, bins)
        except OSError as exc:
            raise OSError(f"failed writing clip {clip_id} under {tmp}: {exc}") from exc
        if final.exists():
            shutil.rmtree(final)
        os.replace(tmp, final)
        paths = files["hr"] + files["lr"] + files["voxels"] + [files["events"]]
        clips.append({
            "id": clip_id,
            "frames": scene.frames,
            "hr_size": [scene.height, scene.width],
            "lr_size": [scene.height // degrade_cfg.factor, scene.width // degrade_cfg.factor],
            "hr": files["hr"], "lr": files["lr"], "voxels": files["voxels"],
            "events": files["events"],
            "num_events": n_events,
            "timestamps_us": [(a + b) // 2 for a, b in windows],
            "windows_us": [list(w) for w in windows],
            "scene": asdict(scene),
            "event_sim": asdict(ev_cfg),
            "checksums": {p: sha256_file(out_dir / p) for p in paths},
        })
    manifest = {
        "version": 1,
        "scale": degrade_cfg.factor,
        "voxel_bins": bins,
        "degrade": asdict(degrade_cfg),
        "clips": clips,
    }
    path = out_dir / "manifest.json"
    tmp = path.with_name("manifest.json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")
    os.replace(tmp, path)
    return manifest


def default_scenes(num_clips, seed=0, **overrides):
    return [SceneConfig(seed=seed * 1000 + i, **overrides) for i in range(num_clips)]


def baseline_sr(lr_frames, cfg: DegradeConfig):
    """Reference upscaler: undo the photometry on the LR frames, then bicubic x4."""
    bright = inverse_photometric(lr_frames, cfg)
    return np.clip(imresize(bright, (bright.shape[-2] * cfg.factor,
                                     bright.shape[-1] * cfg.factor)), 0.0, 1.0)
