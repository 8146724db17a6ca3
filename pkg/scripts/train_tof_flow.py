"""Train the frozen flow estimator used by the tOF metric.

Supervised on rendered scenes whose per-pixel motion is known exactly. The
result is written to ``src/evlvsr/data/tof_flow.evsr``; rerunning with the same
arguments reproduces the file bit for bit on the same platform.

    python scripts/train_tof_flow.py --steps 3000
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch

from evlvsr.checkpoint import Checkpoint, save_checkpoint
from evlvsr.flow import FlowEstimator
from evlvsr.synthdata import SceneConfig, make_layers, render_flow, render_frame

OUT = Path(__file__).resolve().parents[1] / "src" / "evlvsr" / "data" / "tof_flow.evsr"


def make_pairs(n, size, seed):
    srcs, dsts, flows, back = [], [], [], []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        cfg = SceneConfig(height=size, width=size, num_sprites=int(rng.integers(1, 5)),
                          sprite_size=(8, size // 2), max_speed=6.0,
                          background_velocity=tuple(rng.uniform(-3, 3, size=2)),
                          seed=seed * 100_000 + i)
        layers = make_layers(cfg)
        t0 = float(rng.uniform(0, 3))
        srcs.append(render_frame(layers, t0, size, size))
        dsts.append(render_frame(layers, t0 + 1, size, size))
        flows.append(render_flow(layers, t0, size, size))
        back.append(-render_flow(layers, t0 + 1, size, size))
    as_t = lambda a: torch.from_numpy(np.stack(a).astype(np.float32))
    return as_t(srcs), as_t(dsts), as_t(flows), as_t(back)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    src, dst, gt, gt_back = make_pairs(args.pairs, args.size, args.seed)
    v_src, v_dst, v_gt, _ = make_pairs(64, args.size, args.seed + 1)
    net = FlowEstimator(3, levels=3, hidden=32)
    opt = torch.optim.Adam(net.parameters(), args.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, args.steps, 1e-6)
    rng = np.random.default_rng(args.seed)
    start = time.time()
    for step in range(args.steps):
        idx = torch.from_numpy(rng.integers(0, args.pairs, size=args.batch))
        s, d, f = src[idx], dst[idx], gt[idx]
        if rng.random() < 0.5:
            s, d, f = d, s, gt_back[idx]
        pred = net(s, d)
        loss = (pred - f).pow(2).sum(1).add(1e-6).sqrt().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 200 == 0 or step == args.steps - 1:
            with torch.no_grad():
                epe = (net(v_src, v_dst) - v_gt).pow(2).sum(1).sqrt().mean()
            print(f"step {step:5d} loss {loss.item():.3f} val_epe {epe.item():.3f} "
                  f"({time.time() - start:.0f}s)", flush=True)

    args.out.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone() for k, v in net.state_dict().items()}
    config = {"kind": "tof_flow", "in_channels": 3, "levels": 3, "hidden": 32}
    save_checkpoint(Checkpoint(state, config, args.steps, meta={"val_epe": float(epe)}), args.out)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
