import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from evlvsr.errors import InvalidInputError
from evlvsr.metrics import (MetricReport, evaluate_clip, format_table, load_tof_flow, psnr, ssim,
                            tof)


def ref_ssim(a, b, peak=1.0):
    """Direct windowed SSIM: explicit loop over every valid 11x11 window."""
    a, b = np.atleast_3d(a.T).T, np.atleast_3d(b.T).T
    x = np.arange(11) - 5
    g = np.exp(-x ** 2 / (2 * 1.5 ** 2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for ca, cb in zip(a, b):
        for i in range(ca.shape[0] - 10):
            for j in range(ca.shape[1] - 10):
                pa, pb = ca[i:i + 11, j:j + 11], cb[i:i + 11, j:j + 11]
                ma, mb = (win * pa).sum(), (win * pb).sum()
                va = (win * (pa - ma) ** 2).sum()
                vb = (win * (pb - mb) ** 2).sum()
                cov = (win * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                            / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def checkerboard(n=32, cell=2):
    yy, xx = np.mgrid[0:n, 0:n]
    return ((yy // cell + xx // cell) % 2).astype(np.float64)


# PSNR ---------------------------------------------------------------------------

def test_psnr_half_difference():
    a = np.zeros((3, 8, 8))
    assert abs(psnr(a, a + 0.5) - 6.0206) < 1e-3


def test_psnr_identical_is_inf_and_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    assert psnr(a, a) == math.inf
    assert psnr(a, b) == psnr(b, a)
    assert psnr(torch.from_numpy(a), b) == psnr(a, b)


def test_psnr_strictly_decreasing_with_noise():
    rng = np.random.default_rng(1)
    img = rng.random((3, 32, 32))
    noise = rng.standard_normal(img.shape)
    values = [psnr(img, img + s * noise) for s in (0.01, 0.05, 0.1)]
    assert values[0] > values[1] > values[2] >= 0


def test_psnr_shape_mismatch():
    with pytest.raises(InvalidInputError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


# SSIM ---------------------------------------------------------------------------

def test_ssim_self_is_one():
    img = np.random.default_rng(2).random((3, 16, 16))
    assert ssim(img, img) == 1.0


def test_ssim_inverted_checkerboard_is_negative():
    board = checkerboard()
    value = ssim(board, 1 - board)
    assert value < 0
    assert math.isclose(value, ref_ssim(board, 1 - board), abs_tol=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_matches_direct_windowed_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((2, 14, 15))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    assert math.isclose(ssim(a, b), ref_ssim(a, b), abs_tol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_bounded_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 12, 12)), rng.random((3, 12, 12))
    value = ssim(a, b)
    assert -1 <= value <= 1
    assert math.isclose(value, ssim(b, a), rel_tol=1e-12)


@pytest.mark.parametrize("level,shift", [(0.5, 0.01), (0.2, 0.05), (0.8, -0.1)])
def test_ssim_flat_images_luminance_term(level, shift):
    # flat images: variances and covariance vanish, leaving the luminance term
    a = np.full((16, 16), level)
    b = a + shift
    c1 = 0.01 ** 2
    expected = (2 * level * (level + shift) + c1) / (level ** 2 + (level + shift) ** 2 + c1)
    assert math.isclose(ssim(a, b), expected, rel_tol=1e-9)


def test_ssim_window_too_large():
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


# tOF ----------------------------------------------------------------------------

def smooth_sequence(t=3, size=32, seed=0):
    rng = np.random.default_rng(seed)
    coarse = torch.from_numpy(rng.random((t, 3, size // 4, size // 4)))
    return torch.nn.functional.interpolate(coarse, size=size, mode="bicubic",
                                           align_corners=False).clamp(0, 1).numpy()


def test_packaged_flow_is_frozen():
    net = load_tof_flow()
    assert not net.training
    assert not any(p.requires_grad for p in net.parameters())
    assert load_tof_flow() is net


def test_tof_zero_for_identical_sequences():
    seq = smooth_sequence()
    assert tof(seq, seq.copy()) == 0.0


def test_tof_positive_when_one_frame_shifted():
    gt = smooth_sequence()
    pred = gt.copy()
    pred[1] = np.roll(gt[1], 2, axis=-1)
    assert tof(pred, gt) > 0


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_tof_symmetric(seed):
    gt = smooth_sequence(seed=seed)
    pred = np.clip(gt + 0.05 * np.random.default_rng(seed).standard_normal(gt.shape), 0, 1)
    assert abs(tof(pred, gt) - tof(gt, pred)) <= 1e-6
    assert tof(pred, gt) >= 0


def test_tof_errors():
    seq = smooth_sequence()
    with pytest.raises(InvalidInputError):
        tof(seq, seq[:2])
    with pytest.raises(InvalidInputError):
        tof(seq[:1], seq[:1])


# reports ------------------------------------------------------------------------

def test_self_evaluation_report_and_table():
    seq = smooth_sequence()
    report = evaluate_clip(seq, seq, "clip_000", "gt")
    assert report.psnr == [math.inf] * 3 and report.mean_ssim == 1.0 and report.tof == 0.0
    rec = report.to_record()
    assert rec["mean_psnr"] == "inf" and rec["psnr"] == ["inf"] * 3
    other = MetricReport("clip_001", "gt", [30.0], [0.9], 0.5)
    table = format_table([report, other]).splitlines()
    assert len(table) == 4
    assert table[1].split()[:2] == ["clip_000", "gt"] and table[-1].startswith("mean")
