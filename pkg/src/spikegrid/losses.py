"""Spike-domain training objectives for the three detection heads.

All functions take spike trains as (T, B, C, H, W) tensors and return a
scalar tensor that stays attached to the autograd graph, including the
empty-scene cases.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ConfigError

CLAMP_EPS = 1e-6
_straight_through = True


@dataclass
class KpLossConfig:
    alpha_t: float = 0.5
    w_e: float = 0.3
    w_f: float = 0.7
    alpha: float = 2.0
    beta: float = 4.0
    k: int = 3
    eps: float = 1.0
    lambda_d: float = 0.05
    e_gate: int = 40

    def __post_init__(self):
        if not 0 < self.alpha_t < 1:
            raise ConfigError("alpha_t must lie in (0, 1)")
        if self.w_e + self.w_f <= 0:
            raise ConfigError("w_e + w_f must be positive")
        if self.lambda_d >= 1:
            raise ConfigError("lambda_d must be < 1")


@dataclass
class GroundTruth:
    """Targets for a batch; every map is (B, ., H, W) except ``rot_bins`` (B, H, W)."""

    kp_heatmap: torch.Tensor  # (B, 1, H, W) Gaussian, unit peaks
    box_dims: torch.Tensor  # (B, 3, H, W) clamped log10 (h, w, l), zero off-peak
    rot_bins: torch.Tensor  # (B, H, W) int64 bin index, meaningful at peaks

    @property
    def kp_mask(self) -> torch.Tensor:
        return (self.kp_heatmap == 1).to(self.kp_heatmap.dtype)


def temporal_rates(s: torch.Tensor, alpha_t: float):
    """Mean rates over the first floor(alpha_t T) steps and over all T steps."""
    T = s.shape[0]
    t_e = math.floor(alpha_t * T)
    if t_e < 1:
        raise ConfigError(f"early window floor({alpha_t} * {T}) is empty")
    return s[:t_e].mean(dim=0), s.mean(dim=0)


def _clamp_st(x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
    """Clamp the value but let the gradient through unchanged.

    Spike rates of exactly 0 or 1 are common; a plain clamp would leave
    such pixels with no gradient at all and the head could never recover.
    """
    if not _straight_through:
        return x.clamp(lo, hi)
    return x + (x.clamp(lo, hi) - x).detach()


@contextmanager
def exact_clamp():
    """Use an ordinary clamp so autograd matches finite differences of the loss."""
    global _straight_through
    saved, _straight_through = _straight_through, False
    try:
        yield
    finally:
        _straight_through = saved


def focal_heatmap(p_hat: torch.Tensor, y: torch.Tensor, alpha: float = 2.0,
                  beta: float = 4.0) -> torch.Tensor:
    """Gaussian focal loss summed over pixels, divided by max(1, #peaks)."""
    p = _clamp_st(p_hat, CLAMP_EPS, 1 - CLAMP_EPS)
    pos = y == 1
    pos_term = -((1 - p) ** alpha) * torch.log(p)
    neg_term = -((1 - y) ** beta) * p ** alpha * torch.log(1 - p)
    total = torch.where(pos, pos_term, neg_term).sum()
    return total / max(1, int(pos.sum()))


def roi_mask(peaks: torch.Tensor, k: int) -> torch.Tensor:
    """Max-pool dilation of a (B, 1, H, W) peak mask, window = smallest odd >= k."""
    kt = k if k % 2 else k + 1
    return F.max_pool2d(peaks, kt, stride=1, padding=kt // 2)


def masked_dice(rate: torch.Tensor, y: torch.Tensor, roi: torch.Tensor,
                eps: float = 1.0) -> torch.Tensor:
    B = rate.shape[0]
    r = (rate * roi).reshape(B, -1)
    t = (y * roi).reshape(B, -1)
    score = (2 * (r * t).sum(1) + eps) / (r.abs().sum(1) + t.abs().sum(1) + eps)
    return 1 - score.mean()


def kp_map_loss(r_early, r_full, y, cfg: KpLossConfig, epoch: int) -> torch.Tensor:
    """Two-point focal on (early, full) rate maps plus gated masked Dice."""
    focal = (cfg.w_e * focal_heatmap(r_early, y, cfg.alpha, cfg.beta)
             + cfg.w_f * focal_heatmap(r_full, y, cfg.alpha, cfg.beta)) / (cfg.w_e + cfg.w_f)
    if epoch < cfg.e_gate:
        return focal
    roi = roi_mask((y == 1).to(y.dtype), cfg.k)
    return focal + cfg.lambda_d * masked_dice(r_full, y, roi, cfg.eps)


def kp_loss(s: torch.Tensor, gt: GroundTruth, cfg: KpLossConfig, epoch: int) -> torch.Tensor:
    r_e, r_f = temporal_rates(s, cfg.alpha_t)
    return kp_map_loss(r_e, r_f, gt.kp_heatmap, cfg, epoch)


def population_pool(rate: torch.Tensor, k: int) -> torch.Tensor:
    """k x k neighbourhood mean with zero padding (always divides by k^2)."""
    if k % 2 == 0:
        raise ConfigError("population window k must be odd")
    return F.avg_pool2d(rate, k, stride=1, padding=k // 2, count_include_pad=True)


def box_map_loss(pred: torch.Tensor, gt: GroundTruth, k: int = 3) -> torch.Tensor:
    """Masked L1 between pooled predictions (B, 3, H, W) and log10 targets."""
    mask = gt.kp_mask.expand_as(pred)
    pooled = population_pool(pred, k)
    return (mask * (pooled - gt.box_dims).abs()).sum()


def box_loss(s: torch.Tensor, gt: GroundTruth, k: int = 3) -> torch.Tensor:
    return box_map_loss(s.mean(dim=0), gt, k)


def rot_logit_loss(logits: torch.Tensor, gt: GroundTruth, class_weights=None,
                   smoothing: float = 0.1) -> torch.Tensor:
    """Label-smoothed, class-weighted cross-entropy at keypoint pixels.

    ``logits`` is (B, C, H, W). The weighted mean divides by the summed
    weight of the target classes, as torch's ``cross_entropy`` does.
    """
    C = logits.shape[1]
    at = gt.kp_mask[:, 0] == 1
    if not bool(at.any()):
        return logits.sum() * 0.0
    z = logits.permute(0, 2, 3, 1)[at]  # (N, C)
    target = gt.rot_bins[at].long()
    w = (torch.ones(C, dtype=z.dtype) if class_weights is None
         else torch.as_tensor(class_weights, dtype=z.dtype))
    logp = F.log_softmax(z, dim=1)
    nll = -logp.gather(1, target[:, None])[:, 0]
    smooth = -(logp * w[None]).sum(1) / C
    wt = w[target]
    per = (1 - smoothing) * wt * nll + smoothing * smooth
    return per.sum() / wt.sum()


def rot_loss(s: torch.Tensor, gt: GroundTruth, class_weights=None,
             smoothing: float = 0.1) -> torch.Tensor:
    return rot_logit_loss(s.mean(dim=0), gt, class_weights, smoothing)
