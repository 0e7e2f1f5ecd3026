import math

import numpy as np
import pytest
import torch

from spikegrid.core import ConfigError
from spikegrid.losses import (GroundTruth, KpLossConfig, box_loss, exact_clamp, focal_heatmap, kp_loss,
                              masked_dice, roi_mask, rot_loss, temporal_rates)


def _gt(H=4, W=4, peaks=((1, 2),), dims=None, bins=None):
    y = torch.zeros(1, 1, H, W, dtype=torch.float64)
    for r, c in peaks:
        y[0, 0, r, c] = 1
    d = torch.zeros(1, 3, H, W, dtype=torch.float64) if dims is None else dims
    b = torch.zeros(1, H, W, dtype=torch.long) if bins is None else bins
    return GroundTruth(y, d, b)


def test_temporal_rates():
    e, f = temporal_rates(torch.ones(13, 1, 1, 2, 2), 0.5)
    assert torch.all(e == 1) and torch.all(f == 1)
    s = torch.zeros(13, 1, 1, 1, 1)
    s[-1] = 1
    e, f = temporal_rates(s, 0.5)
    assert e.item() == 0 and math.isclose(f.item(), 1 / 13, rel_tol=1e-6)
    with pytest.raises(ConfigError):
        temporal_rates(torch.ones(1, 1, 1, 1, 1), 0.5)


def test_focal_closed_forms():
    assert math.isclose(focal_heatmap(torch.tensor([[0.5]]), torch.tensor([[1.0]])).item(),
                        0.25 * math.log(2), rel_tol=1e-6)
    assert focal_heatmap(torch.tensor([[0.0]]), torch.tensor([[0.0]])).item() < 1e-10
    v = focal_heatmap(torch.tensor([[0.5]], dtype=torch.float64), torch.tensor([[0.5]], dtype=torch.float64))
    assert math.isclose(v.item(), 0.5 ** 4 * 0.5 ** 2 * math.log(2), rel_tol=1e-9)
    assert math.isclose(0.5 ** 6 * math.log(2), 0.01083, abs_tol=1e-5)


def test_focal_gradient_survives_clamp():
    p = torch.tensor([[0.0]], requires_grad=True)
    focal_heatmap(p, torch.tensor([[1.0]])).backward()
    assert p.grad.item() < 0  # pushes a silent peak pixel upward
    q = torch.tensor([[0.0]], requires_grad=True)
    with exact_clamp():
        focal_heatmap(q, torch.tensor([[1.0]])).backward()
    assert q.grad.item() == 0
    assert focal_heatmap(q, torch.tensor([[1.0]])).grad_fn is not None


def test_kp_loss_gating():
    cfg = KpLossConfig(e_gate=5)
    gt = _gt()
    s = (torch.rand(6, 1, 1, 4, 4) < 0.3).double()
    before = kp_loss(s, gt, cfg, 4)
    r_e, r_f = temporal_rates(s, cfg.alpha_t)
    focal = (cfg.w_e * focal_heatmap(r_e, gt.kp_heatmap) + cfg.w_f * focal_heatmap(r_f, gt.kp_heatmap)) / (cfg.w_e + cfg.w_f)
    assert torch.isclose(before, focal)
    after = kp_loss(s, gt, cfg, 5)
    dice = masked_dice(r_f, gt.kp_heatmap, roi_mask(gt.kp_mask, cfg.k), cfg.eps)
    assert torch.isclose(after, focal + cfg.lambda_d * dice)


def test_kp_loss_near_zero_for_perfect_prediction():
    gt = _gt()
    s = torch.zeros(10, 1, 1, 4, 4, dtype=torch.float64)
    s[:, 0, 0, 1, 2] = 1
    loss = kp_loss(s, gt, KpLossConfig(e_gate=0), 10)
    assert loss.item() < 1e-4


def test_kp_loss_hand_built_4x4():
    # one peak at (1, 2), k=3: ROI is the 3x3 window around it
    gt = _gt()
    s = torch.zeros(4, 1, 1, 4, 4, dtype=torch.float64)
    s[:2, 0, 0, 1, 2] = 1  # early window only
    s[3, 0, 0, 0, 0] = 1
    cfg = KpLossConfig(alpha_t=0.5, k=3, lambda_d=0.1, e_gate=0)
    d = 1e-6
    pos_e = -((1 - (1 - d)) ** 2) * math.log(1 - d)
    pos_f = -((1 - 0.5) ** 2) * math.log(0.5)
    neg_f = -(0.25 ** 2) * math.log(0.75)
    focal = (0.3 * pos_e + 0.7 * (pos_f + neg_f)) / 1.0
    dice = 1 - (2 * 0.5 + 1) / (0.5 + 1 + 1)
    assert math.isclose(kp_loss(s, gt, cfg, 0).item(), focal + 0.1 * dice, abs_tol=1e-6)


def test_box_loss_examples():
    gt = _gt(5, 5, peaks=())
    assert box_loss(torch.ones(3, 1, 3, 5, 5), gt).item() == 0
    r = 0.6
    dims = torch.zeros(1, 3, 5, 5, dtype=torch.float64)
    dims[0, :, 2, 2] = r
    gt = _gt(5, 5, peaks=((2, 2),), dims=dims)
    # every step fires with rate r through a constant field: use a fractional "train"
    s = torch.full((1, 1, 3, 5, 5), r, dtype=torch.float64)
    assert box_loss(s, gt, 3).item() < 1e-12


def test_box_loss_brute_force_5x5():
    rng = np.random.default_rng(5)
    dims = torch.from_numpy(rng.uniform(0.1, 0.7, (1, 3, 5, 5)))
    gt = _gt(5, 5, peaks=((0, 4),), dims=dims)
    s = torch.from_numpy((rng.random((4, 1, 3, 5, 5)) < 0.5).astype(np.float64))
    rate = s.mean(0)[0]
    want = 0.0
    for c in range(3):
        acc = sum(rate[c, a, b].item() for a in range(-1, 2) for b in range(3, 6)
                  if 0 <= a < 5 and 0 <= b < 5)
        want += abs(acc / 9 - dims[0, c, 0, 4].item())
    assert math.isclose(box_loss(s, gt, 3).item(), want, abs_tol=1e-6)


def test_rot_loss_examples():
    assert rot_loss(torch.rand(3, 1, 31, 4, 4), _gt(peaks=())).item() == 0
    bins = torch.zeros(1, 4, 4, dtype=torch.long)
    bins[0, 1, 2] = 7
    gt = _gt(bins=bins)
    s = torch.zeros(2, 1, 31, 4, 4, dtype=torch.float64)
    s[:, 0, 7, 1, 2] = 1
    want = -torch.log_softmax(torch.eye(31, dtype=torch.float64)[7], 0)[7].item()
    assert math.isclose(rot_loss(s, gt, smoothing=0.0).item(), want, rel_tol=1e-12)
    uniform = torch.ones(2, 1, 31, 4, 4, dtype=torch.float64)
    assert math.isclose(rot_loss(uniform, gt, smoothing=0.0).item(), math.log(31), rel_tol=1e-12)


def test_kp_config_validation():
    with pytest.raises(ConfigError):
        KpLossConfig(alpha_t=1.0)
    with pytest.raises(ConfigError):
        KpLossConfig(lambda_d=1.0)
