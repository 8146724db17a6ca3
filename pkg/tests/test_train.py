import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from evlvsr.dataset import ClipDataset
from evlvsr.errors import InvalidInputError, TrainingDiverged
from evlvsr.events import EventSimConfig
from evlvsr.model import ModelConfig, build_model
from evlvsr.synthdata import DegradeConfig, SceneConfig, build_dataset
from evlvsr.train import (CHARBONNIER_EPS, TrainConfig, augment, build_optimizer,
                          charbonnier_loss, cosine_lr, set_learning_rates, train_loop,
                          train_step)

TINY = ModelConfig(channels=8, r_embed_blocks=1, retinex_channels=4, attention_depth=2)


class FixedClipDataset:
    """One synthetic clip; batches are flipped windows of it."""

    def __init__(self, t=3, h=16, w=16, seed=0):
        g = torch.Generator().manual_seed(seed)
        self.targets = torch.rand(t, 3, 4 * h, 4 * w, generator=g)
        self.frames = torch.nn.functional.avg_pool2d(self.targets, 4) * 0.3
        self.voxels = torch.randn(t, 5, h, w, generator=g).clamp(-1, 1)

    def sample_batch(self, rng, cfg):
        out = [augment(self.frames[:cfg.clip_length], self.voxels[:cfg.clip_length],
                       self.targets[:cfg.clip_length], rng, cfg) for _ in range(cfg.batch_size)]
        return tuple(torch.stack(x) for x in zip(*out))


def small_cfg(**kw):
    base = dict(total_steps=10, batch_size=1, clip_length=3, crop_size=16, aux_freeze_steps=2,
                eval_every=0, ckpt_every=0)
    base.update(kw)
    return TrainConfig(**base)


# loss ---------------------------------------------------------------------------

def test_charbonnier_equal_inputs_gives_eps():
    x = torch.rand(2, 3, 3, 4, 4, dtype=torch.float64)
    assert charbonnier_loss(x, x.clone()).item() == CHARBONNIER_EPS


def test_charbonnier_single_pixel_hand_value():
    pred = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    target = torch.full_like(pred, 3.0)
    assert charbonnier_loss(pred, target).item() == math.sqrt(9 + 1e-24)


def test_charbonnier_sums_per_frame_and_averages_frames():
    pred = torch.zeros(2, 3, 2, 2, dtype=torch.float64)
    target = pred.clone()
    target[0] = 1.0           # frame 0: 12 unit differences
    target[1, 0, 0, 0] = 2.0  # frame 1: a single difference of 2
    expected = (math.sqrt(12 + 1e-24) + math.sqrt(4 + 1e-24)) / 2
    assert math.isclose(charbonnier_loss(pred, target).item(), expected, rel_tol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_charbonnier_homogeneous_for_large_differences(seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    target = pred + 1.0 + torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    base = charbonnier_loss(pred, target).item() - CHARBONNIER_EPS
    doubled = charbonnier_loss(pred, pred + 2 * (target - pred)).item() - CHARBONNIER_EPS
    assert math.isclose(doubled, 2 * base, rel_tol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10))
def test_charbonnier_at_least_eps(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a = torch.rand(2, 3, 4, 4, generator=g, dtype=torch.float64)
    b = a + scale * torch.randn(2, 3, 4, 4, generator=g, dtype=torch.float64)
    assert charbonnier_loss(a, b).item() >= CHARBONNIER_EPS


def test_charbonnier_shape_errors():
    with pytest.raises(InvalidInputError):
        charbonnier_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))
    with pytest.raises(InvalidInputError):
        charbonnier_loss(torch.zeros(3, 4, 4), torch.zeros(3, 4, 4))


# augmentation -------------------------------------------------------------------

class FixedDraws:
    def __init__(self, *values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


def impulse_clip(y, x, h=16, w=16):
    frames = torch.zeros(2, 3, h, w)
    voxels = torch.zeros(2, 5, h, w)
    targets = torch.zeros(2, 3, 4 * h, 4 * w)
    frames[..., y, x] = 1
    voxels[..., y, x] = 1
    targets[..., 4 * y:4 * y + 4, 4 * x:4 * x + 4] = 1
    return frames, voxels, targets


def peak(t):
    idx = int(t[0, 0].argmax())
    return divmod(idx, t.shape[-1])


@pytest.mark.parametrize("hflip,vflip", [(True, False), (False, True), (True, True)])
def test_flip_keeps_impulse_aligned(hflip, vflip):
    cfg = small_cfg(crop_size=16)
    frames, voxels, targets = impulse_clip(3, 5)
    rng = FixedDraws(0.0 if hflip else 0.9, 0.0 if vflip else 0.9)
    f, v, y = augment(frames, voxels, targets, rng, cfg)
    ey = 16 - 1 - 3 if vflip else 3
    ex = 16 - 1 - 5 if hflip else 5
    assert peak(f) == (ey, ex) and peak(v) == (ey, ex)
    assert peak(y) == (4 * ey, 4 * ex)


def test_no_flip_draw_is_identity_and_double_flip_restores():
    cfg = small_cfg(crop_size=16)
    clip = impulse_clip(2, 7)
    out = augment(*clip, FixedDraws(0.9, 0.9), cfg)
    assert all(torch.equal(a, b) for a, b in zip(out, clip))
    once = augment(*clip, FixedDraws(0.0, 0.9), cfg)
    twice = augment(*once, FixedDraws(0.0, 0.9), cfg)
    assert all(torch.equal(a, b) for a, b in zip(twice, clip))


def test_center_crop_and_errors():
    cfg = small_cfg(crop_size=8)
    frames, voxels, targets = impulse_clip(8, 8)
    f, v, y = augment(frames, voxels, targets, FixedDraws(0.9, 0.9), cfg)
    assert f.shape[-2:] == (8, 8) and y.shape[-2:] == (32, 32)
    assert peak(f) == (4, 4) and peak(y) == (16, 16)
    with pytest.raises(InvalidInputError):
        augment(frames, voxels, targets, FixedDraws(0.9, 0.9), small_cfg(crop_size=32))
    with pytest.raises(InvalidInputError):
        augment(frames, voxels[..., :8], targets, FixedDraws(0.9, 0.9), cfg)


# schedule and freezing ----------------------------------------------------------

def test_cosine_endpoints():
    cfg = TrainConfig()
    assert cosine_lr(0, cfg.total_steps, cfg.lr_main, cfg.lr_floor) == cfg.lr_main
    assert math.isclose(cosine_lr(cfg.total_steps, cfg.total_steps, cfg.lr_main, cfg.lr_floor),
                        1e-7, rel_tol=1e-12)
    mid = cosine_lr(cfg.total_steps // 2, cfg.total_steps, cfg.lr_main, cfg.lr_floor)
    assert math.isclose(mid, (cfg.lr_main + cfg.lr_floor) / 2, rel_tol=1e-12)


def test_config_validation_and_recipe():
    with pytest.raises(InvalidInputError):
        TrainConfig(lr_main=0)
    with pytest.raises(InvalidInputError):
        TrainConfig(total_steps=10, aux_freeze_steps=11)
    with pytest.raises(InvalidInputError):
        TrainConfig.from_dict({"bogus": 1})
    recipe = TrainConfig.reference_recipe()
    assert (recipe.total_steps, recipe.batch_size, recipe.clip_length, recipe.crop_size,
            recipe.aux_freeze_steps, recipe.lr_main, recipe.lr_aux) == (
        300_000, 8, 15, 64, 5000, 2e-4, 2.5e-5)


def test_aux_parameters_frozen_during_window():
    model = build_model(TINY)
    cfg = small_cfg(aux_freeze_steps=3)
    opt = build_optimizer(model, cfg)
    data = FixedClipDataset()
    rng = np.random.default_rng(0)
    aux_before = [p.detach().clone() for p in model.aux_parameters()]
    main_before = [p.detach().clone() for p in model.main_parameters()]
    for step in range(3):
        train_step(model, opt, data.sample_batch(rng, cfg), cfg, step)
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.aux_parameters())
    assert all(torch.equal(a, p) for a, p in zip(aux_before, model.aux_parameters()))
    assert any(not torch.equal(a, p) for a, p in zip(main_before, model.main_parameters()))
    train_step(model, opt, data.sample_batch(rng, cfg), cfg, 3)
    assert any(not torch.equal(a, p) for a, p in zip(aux_before, model.aux_parameters()))


def test_aux_group_is_flow_and_retinex():
    model = build_model(TINY)
    aux = {id(p) for p in model.aux_parameters()}
    expected = {id(p) for m in (model.flow, model.retinex) for p in m.parameters()}
    assert aux == expected
    assert not aux & {id(p) for p in model.main_parameters()}


def test_zero_learning_rate_step_changes_nothing():
    model = build_model(TINY)
    cfg = small_cfg()
    opt = build_optimizer(model, cfg)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    batch = FixedClipDataset().sample_batch(np.random.default_rng(0), cfg)
    set_learning_rates(opt, 0, cfg)
    for group in opt.param_groups:
        group["lr"] = 0.0
    model(batch[0], batch[1]).sum().backward()
    opt.step()
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_learning_rates_follow_schedule():
    model = build_model(TINY)
    cfg = small_cfg(total_steps=10, aux_freeze_steps=2)
    opt = build_optimizer(model, cfg)
    assert set_learning_rates(opt, 0, cfg) == (cfg.lr_main, 0.0)
    lr_main, lr_aux = set_learning_rates(opt, 2, cfg)
    assert lr_aux == cosine_lr(2, 10, cfg.lr_aux, cfg.lr_floor) > 0
    assert {g["name"]: g["lr"] for g in opt.param_groups} == {"main": lr_main, "aux": lr_aux}


# loop ---------------------------------------------------------------------------

def test_loop_logs_and_checkpoints(tmp_path):
    cfg = small_cfg(total_steps=6, ckpt_every=3, eval_every=3)
    data = FixedClipDataset()
    ckpt, records = train_loop(data, cfg, build_model(TINY), tmp_path,
                               eval_clip=(data.frames, data.voxels, data.targets))
    assert [r["step"] for r in records] == list(range(6))
    assert all(r["loss"] >= CHARBONNIER_EPS for r in records)
    assert "eval_psnr" in records[2] and "eval_psnr" not in records[0]
    assert ckpt.step == 6 and (tmp_path / "checkpoint.evsr").exists()
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 6 and "wall_time" in lines[0]
    assert "wall_time" not in (tmp_path / "loss_log.jsonl").read_text()


def test_callback_stops_early():
    cfg = small_cfg(total_steps=10)
    ckpt, records = train_loop(FixedClipDataset(), cfg, build_model(TINY),
                               callback=lambda r: r["step"] == 3)
    assert len(records) == 4 and ckpt.step == 4


def test_identical_seeds_give_identical_loss_curves(tmp_path):
    cfg = small_cfg(total_steps=5)
    runs = []
    for name in ("a", "b"):
        train_loop(FixedClipDataset(), cfg, build_model(TINY), tmp_path / name)
        runs.append((tmp_path / name / "loss_log.jsonl").read_bytes())
    assert runs[0] == runs[1]


def test_nan_loss_aborts_with_record(tmp_path):
    data = FixedClipDataset()
    data.targets[0, 0, 0, 0] = float("nan")
    cfg = small_cfg(total_steps=3, hflip_prob=0, vflip_prob=0)
    with pytest.raises(TrainingDiverged) as info:
        train_loop(data, cfg, build_model(TINY), tmp_path)
    assert info.value.record["step"] == 0
    assert "non-finite" in (tmp_path / "train_log.jsonl").read_text()


@pytest.mark.slow
def test_overfit_single_clip_halves_loss(tmp_path):
    scene = SceneConfig(height=32, width=32, num_sprites=2, sprite_size=(6, 14), frames=3,
                        supersample=4, seed=5)
    build_dataset([scene], DegradeConfig(), EventSimConfig(seed=5), tmp_path)
    cfg = small_cfg(total_steps=200, crop_size=8, lr_main=1e-3, aux_freeze_steps=20)
    _, records = train_loop(ClipDataset(tmp_path), cfg,
                            build_model(ModelConfig(channels=8, r_embed_blocks=1,
                                                    retinex_channels=4)))
    losses = [r["loss"] for r in records]
    start = float(np.mean(losses[:5]))
    end = float(np.mean(losses[-5:]))
    assert end <= 0.5 * start, (start, end)
