"""Command line entry point: ``evlvsr {gen-data,train,infer,eval}``.

Settings come from three layers, later ones winning: built-in defaults, a
``key = value`` config file (``--config`` or ``$EVLVSR_CONFIG``), and flags.
Every config key has a matching flag with dashes for underscores. A config
file may carry keys for several subcommands; keys that no subcommand knows
are rejected by name.
"""

import argparse
import configparser
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import hash_config, load_checkpoint
from .dataset import ClipDataset, load_clip, load_manifest
from .errors import ConfigMismatchError, IntegrityError, InvalidInputError, TrainingDiverged
from .events import EventSimConfig
from .metrics import evaluate_clip, format_table
from .model import ABLATIONS, ModelConfig, ablation_config, build_model
from .synthdata import (DegradeConfig, baseline_sr, build_dataset, default_scenes, load_png,
                        save_png)
from .train import TrainConfig, train_loop

CONFIG_ENV = "EVLVSR_CONFIG"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CKPT_MISMATCH = 4
EXIT_MISSING_PRED = 5


class UsageError(Exception):
    pass


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _dataclass_keys(cls, skip=()):
    keys = {}
    defaults = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        value = getattr(defaults, f.name)
        kind = _parse_bool if isinstance(value, bool) else type(value)
        keys[f.name] = (kind, value)
    return keys


GEN_KEYS = {
    "clips": (int, 4),
    "seed": (int, 0),
    "frames": (int, 5),
    "height": (int, 128),
    "width": (int, 128),
    "num_sprites": (int, 4),
    "max_speed": (float, 3.0),
    "supersample": (int, 8),
    "alpha": (float, 0.35),
    "gamma": (float, 1.4),
    "noise_sigma": (float, 0.01),
    "contrast_threshold": (float, 0.15),
    "noise_rate": (float, 1.0),
    "bins": (int, 5),
}
MODEL_KEYS = {**_dataclass_keys(ModelConfig, skip=("seed",)), "ablation": (str, "full")}
TRAIN_KEYS = {**_dataclass_keys(TrainConfig), **MODEL_KEYS, "threads": (int, 1)}
INFER_KEYS = {"threads": (int, 1)}
EVAL_KEYS = {"workers": (int, 1)}

COMMAND_KEYS = {"gen-data": GEN_KEYS, "train": TRAIN_KEYS, "infer": INFER_KEYS,
                "eval": EVAL_KEYS}
ALL_KEYS = set().union(*COMMAND_KEYS.values(), MODEL_KEYS)


def read_config_file(path):
    """Parse a flat ``key = value`` file; ``#`` and ``;`` start comments."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from exc
    values = dict(parser["config"])
    unknown = sorted(set(values) - ALL_KEYS)
    if unknown:
        raise UsageError(f"unknown config key {unknown[0]!r} in {path}")
    return values


def resolve_settings(args, keys, extra_known=()):
    """Merge defaults, config file and flags into a typed dict over ``keys``.

    Returns (settings, explicitly_set) where the second is the set of keys
    that came from the file or a flag rather than a default.
    """
    settings = {k: default for k, (_, default) in keys.items()}
    explicit = set()
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        for key, raw in read_config_file(path).items():
            if key in keys:
                try:
                    settings[key] = keys[key][0](raw)
                except ValueError as exc:
                    raise UsageError(f"bad value for config key {key!r}: {exc}") from exc
                explicit.add(key)
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
            explicit.add(key)
    return settings, explicit


def _add_keys(parser, keys):
    group = parser.add_argument_group("settings (also accepted as config-file keys)")
    for key, (kind, default) in keys.items():
        flag = "--" + key.replace("_", "-")
        group.add_argument(flag, dest=key, type=kind, default=None, metavar=key.upper(),
                           help=f"default: {default}")


def run_metadata(command, settings, argv, seed=None):
    return {
        "command": command,
        "argv": list(argv),
        "settings": settings,
        "config_hash": hash_config(settings),
        "seed": seed,
        "versions": {
            "evlvsr": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
    }


def write_json(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)


def fixed_precision(threads):
    """Single-threaded deterministic kernels so reruns match byte for byte."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, int(threads)))


# gen-data ------------------------------------------------------------------

def cmd_gen_data(args, argv):
    s, _ = resolve_settings(args, GEN_KEYS)
    scenes = default_scenes(s["clips"], s["seed"], height=s["height"], width=s["width"],
                            num_sprites=s["num_sprites"], max_speed=s["max_speed"],
                            frames=s["frames"], supersample=s["supersample"])
    degrade = DegradeConfig(s["alpha"], s["gamma"], s["noise_sigma"])
    events = EventSimConfig(s["contrast_threshold"], noise_rate=s["noise_rate"],
                            seed=s["seed"] * 1000)
    build_dataset(scenes, degrade, events, args.out, bins=s["bins"])
    manifest = Path(args.out) / "manifest.json"
    print(manifest)
    return EXIT_OK


# train ---------------------------------------------------------------------

def model_config_from(settings):
    base = ModelConfig(seed=settings.get("seed", 0),
                       **{k: settings[k] for k in MODEL_KEYS if k not in ("ablation",)})
    return ablation_config(settings["ablation"], base)


def cmd_train(args, argv):
    s, _ = resolve_settings(args, TRAIN_KEYS)
    if s["ablation"] not in ABLATIONS:
        raise UsageError(f"unknown ablation {s['ablation']!r}; valid names: "
                         f"{', '.join(ABLATIONS)}")
    fixed_precision(s["threads"])
    train_cfg = TrainConfig(**{f.name: s[f.name] for f in fields(TrainConfig)})
    model_cfg = model_config_from(s)
    dataset = ClipDataset(args.data)
    manifest = dataset.manifest
    if manifest.get("voxel_bins", model_cfg.voxel_bins) != model_cfg.voxel_bins:
        raise UsageError(f"dataset has {manifest['voxel_bins']} voxel bins, "
                         f"model expects {model_cfg.voxel_bins}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = run_metadata("train", s, argv, seed=train_cfg.seed)
    meta["model_config"] = model_cfg.to_dict()
    meta["model_config_hash"] = model_cfg.config_hash()
    write_json(out / "run.json", meta)

    model = build_model(model_cfg)
    eval_clip = dataset.clips[0]

    def report(record):
        if args.verbose or "eval_psnr" in record:
            extra = f" eval_psnr {record['eval_psnr']:.2f}" if "eval_psnr" in record else ""
            print(f"step {record['step'] + 1}/{train_cfg.total_steps} "
                  f"loss {record['loss']:.4f}{extra}", flush=True)

    try:
        train_loop(dataset, train_cfg, model, out_dir=out, eval_clip=eval_clip, callback=report)
    except TrainingDiverged as exc:
        kept = out / "checkpoint.evsr"
        note = f"; last good checkpoint kept at {kept}" if kept.exists() else ""
        print(f"error: training diverged: {exc}{note}", file=sys.stderr)
        return EXIT_DIVERGED
    print(out / "checkpoint.evsr")
    return EXIT_OK


# infer ---------------------------------------------------------------------

def falsecolor(maps, cmap="inferno"):
    """Map a stack of 2-D arrays to RGB via a matplotlib colormap, one scale per map."""
    from matplotlib import colormaps

    out = []
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        lo, hi = float(m.min()), float(m.max())
        norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
        out.append(colormaps[cmap](norm)[..., :3].transpose(2, 0, 1))
    return out


def _nearest(img, size):
    h, w = img.shape[-2:]
    ys = np.arange(size[0]) * h // size[0]
    xs = np.arange(size[1]) * w // size[1]
    return img[..., ys[:, None], xs[None, :]]


def hstack(images, gap=2):
    h = max(i.shape[-2] for i in images)
    parts = []
    for i, img in enumerate(images):
        if i:
            parts.append(np.ones((3, h, gap)))
        parts.append(_nearest(img, (h, img.shape[-1] * h // img.shape[-2])))
    return np.concatenate(parts, axis=-1)


def event_feature_panel(voxels, shallow, scales):
    """One row: raw voxel activity, shallow event features, then each IEE scale."""
    maps = [np.abs(voxels).sum(0), np.abs(shallow).mean(0)]
    maps += [np.abs(s).mean(0) for s in scales]
    return hstack(falsecolor(maps))


def _load_infer_model(args, settings, explicit, manifest):
    try:
        ckpt = load_checkpoint(args.checkpoint)
        cfg = ModelConfig.from_dict(ckpt.config)
    except (IntegrityError, InvalidInputError, TypeError) as exc:
        raise ConfigMismatchError(f"cannot use checkpoint {args.checkpoint}: {exc}") from exc
    expected = {k: settings[k] for k in explicit if k in MODEL_KEYS and k != "ablation"}
    if "ablation" in explicit:
        if settings["ablation"] not in ABLATIONS:
            raise UsageError(f"unknown ablation {settings['ablation']!r}; valid names: "
                             f"{', '.join(ABLATIONS)}")
        expected.update(ABLATIONS[settings["ablation"]])
    diff = {k: (v, ckpt.config.get(k)) for k, v in expected.items() if ckpt.config.get(k) != v}
    if diff:
        raise ConfigMismatchError(f"checkpoint config differs from requested: {diff}")
    if manifest.get("voxel_bins", cfg.voxel_bins) != cfg.voxel_bins:
        raise ConfigMismatchError(f"checkpoint expects {cfg.voxel_bins} voxel bins, dataset has "
                                  f"{manifest['voxel_bins']}")
    if manifest.get("scale", cfg.scale_factor) != cfg.scale_factor:
        raise ConfigMismatchError("checkpoint and dataset scale factors differ")
    model = build_model(cfg)
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model


@torch.no_grad()
def cmd_infer(args, argv):
    s, explicit = resolve_settings(args, {**INFER_KEYS, **MODEL_KEYS})
    fixed_precision(s["threads"])
    manifest, root = load_manifest(args.data)
    clips = manifest["clips"]
    if args.clip:
        wanted = set(args.clip)
        missing = wanted - {c["id"] for c in clips}
        if missing:
            raise UsageError(f"unknown clip ids: {sorted(missing)}")
        clips = [c for c in clips if c["id"] in wanted]
    if args.baseline:
        if args.checkpoint or args.dump_event_features:
            raise UsageError("--baseline takes no checkpoint and has no event features")
        model = None
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint is required unless --baseline is given")
        model = _load_infer_model(args, s, explicit, manifest)
    degrade = DegradeConfig(**manifest["degrade"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = run_metadata("infer", s, argv)
    meta["checkpoint"] = str(args.checkpoint) if args.checkpoint else None
    write_json(out / "run.json", meta)
    for clip in clips:
        frames, voxels, targets = load_clip(clip, root, with_targets=args.panels)
        feats = None
        if model is None:
            pred = torch.from_numpy(baseline_sr(frames.numpy(), degrade).astype(np.float32))
        else:
            pred, feats = model(frames[None], voxels[None], return_features=True)
            pred = pred[0]
        clip_dir = out / clip["id"]
        clip_dir.mkdir(parents=True, exist_ok=True)
        for t, img in enumerate(pred.numpy()):
            save_png(clip_dir / f"frame_{t:04d}.png", img)
        if args.panels:
            (clip_dir / "panels").mkdir(exist_ok=True)
            base = baseline_sr(frames.numpy(), degrade)
            for t in range(len(pred)):
                panel = hstack([frames[t].numpy(), base[t], pred[t].numpy(), targets[t].numpy()])
                save_png(clip_dir / "panels" / f"frame_{t:04d}.png", panel)
        if args.dump_event_features:
            (clip_dir / "event_features").mkdir(exist_ok=True)
            scales = [s_.numpy() for s_ in feats["events"]]
            shallow = feats["f_e"].numpy()
            for t in range(len(pred)):
                panel = event_feature_panel(voxels[t].numpy(), shallow[t], [x[t] for x in scales])
                save_png(clip_dir / "event_features" / f"frame_{t:04d}.png", panel)
        print(clip_dir)
    return EXIT_OK


# eval ----------------------------------------------------------------------

def histogram_panel(path, pred, gt, title):
    """Per-channel intensity histograms of prediction vs ground truth."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(9, 2.6), sharey=True)
    bins = np.linspace(0, 1, 65)
    for c, (ax, name) in enumerate(zip(axes, ("R", "G", "B"))):
        ax.hist(gt[:, c].ravel(), bins=bins, color="0.6", label="ground truth")
        ax.hist(pred[:, c].ravel(), bins=bins, histtype="step", color=name.lower()
                if name != "G" else "green", label="prediction")
        ax.set_title(name)
        ax.set_xlim(0, 1)
    axes[0].legend(fontsize=7)
    fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)


def _pred_paths(pred_root, clip, subdir):
    base = Path(pred_root) / clip["id"]
    if subdir:
        base = base / subdir
    return [base / f"frame_{t:04d}.png" for t in range(len(clip["hr"]))]


def cmd_eval(args, argv):
    s, _ = resolve_settings(args, EVAL_KEYS)
    manifest, root = load_manifest(args.data)
    clips = manifest["clips"]
    missing = [str(p) for c in clips for p in _pred_paths(args.pred, c, args.pred_subdir)
               if not p.is_file()]
    if missing:
        shown = ", ".join(missing[:3]) + (" ..." if len(missing) > 3 else "")
        print(f"error: {len(missing)} prediction files missing: {shown}", file=sys.stderr)
        return EXIT_MISSING_PRED
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(clip):
        pred = np.stack([load_png(p) for p in _pred_paths(args.pred, clip, args.pred_subdir)])
        gt = np.stack([load_png(root / p) for p in clip["hr"]])
        if pred.shape != gt.shape:
            raise InvalidInputError(f"{clip['id']}: prediction shape {pred.shape} "
                                    f"differs from ground truth {gt.shape}")
        report = evaluate_clip(pred, gt, clip["id"], args.method)
        if args.histograms:
            (out / "histograms").mkdir(exist_ok=True)
            histogram_panel(out / "histograms" / f"{clip['id']}.png", pred, gt,
                            f"{clip['id']} / {args.method}")
        return report

    workers = max(1, s["workers"])
    with ThreadPoolExecutor(workers) as pool:
        reports = list(pool.map(one, clips))
    with open(out / "metrics.jsonl", "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    write_json(out / "run.json", run_metadata("eval", s, argv))
    print(table)
    return EXIT_OK


# entry point ---------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="evlvsr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text, keys):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help=f"key = value settings file (default: ${CONFIG_ENV})")
        _add_keys(p, keys)
        return p

    p = add("gen-data", "Generate a synthetic dataset and its manifest.", GEN_KEYS)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")

    p = add("train", "Train a model on a generated dataset.", TRAIN_KEYS)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("-v", "--verbose", action="store_true", help="print every step")

    p = add("infer", "Super-resolve clips with a trained checkpoint.",
            {**INFER_KEYS, **MODEL_KEYS})
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--clip", action="append", default=None,
                   help="clip id to process (repeatable; default all)")
    p.add_argument("--baseline", action="store_true",
                   help="write the brighten + bicubic reference instead of model output")
    p.add_argument("--panels", action="store_true",
                   help="also write LR | baseline | output | ground-truth panels")
    p.add_argument("--dump-event-features", action="store_true",
                   help="write falsecolor event features before and after enhancement")

    p = add("eval", "Score predictions against ground truth.", EVAL_KEYS)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or manifest")
    p.add_argument("--pred", type=Path, required=True, help="root of per-clip prediction dirs")
    p.add_argument("--pred-subdir", default="",
                   help="subdirectory inside each clip dir holding the frames")
    p.add_argument("--out", type=Path, required=True, help="report directory")
    p.add_argument("--method", default="method", help="method id for the report")
    p.add_argument("--histograms", action="store_true", help="write RGB histogram panels")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CKPT_MISMATCH
    except (InvalidInputError, IntegrityError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
