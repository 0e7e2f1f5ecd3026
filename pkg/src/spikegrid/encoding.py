"""Input spike encoders: Poisson rate, latency (TTFS), z-axis temporal, self-coding.

Every encoder can be turned into the per-step stem input by
:func:`network_input`, which returns a (T, B, C, H, W) float tensor.
"""

from __future__ import annotations

from enum import Enum

import numpy as np
import torch

from .core import ConfigError, RngStream, SpikeTrain

N_PRIMARY = 5


class EncoderKind(str, Enum):
    POISSON = "poisson"
    LATENCY = "latency"
    ZAXIS = "zaxis"
    SELF = "self"


def _as_batch(x) -> np.ndarray:
    arr = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    arr = arr.astype(np.float32)
    return arr[None] if arr.ndim == 3 else arr


def _check_unit(arr: np.ndarray):
    if arr.size and (arr.min() < 0 or arr.max() > 1 or not np.isfinite(arr).all()):
        raise ValueError("encoder input must lie in [0, 1]")


def encode_poisson(x, steps: int, rng: RngStream) -> SpikeTrain:
    arr = _as_batch(x)
    _check_unit(arr)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    u = rng.generator.random((steps,) + arr.shape)
    return SpikeTrain(torch.from_numpy((u < arr[None]).astype(np.float32)))


def latency_step(x, steps: int):
    """Firing step ``round((1 - x)(T - 1))``, ties to even; -1 for silent inputs."""
    x = np.asarray(x, dtype=np.float64)
    t = np.rint((1.0 - x) * (steps - 1)).astype(np.int64)
    return np.where(x > 0, t, -1)


def encode_latency(x, steps: int) -> SpikeTrain:
    arr = _as_batch(x)
    _check_unit(arr)
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    t_fire = latency_step(arr, steps)
    out = np.arange(steps).reshape(-1, 1, 1, 1, 1) == t_fire[None]
    return SpikeTrain(torch.from_numpy(out.astype(np.float32)))


def encode_zaxis(zbins, steps: int) -> SpikeTrain:
    """Height bin ``t`` becomes the single spike plane at step ``t``.

    Returns a (T, B, 1, H, W) train; steps past the last bin are silent.
    """
    arr = _as_batch(zbins)
    n_bins = arr.shape[1]
    if steps < n_bins:
        raise ConfigError(f"z-axis coding needs steps >= {n_bins} bins, got {steps}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise ValueError("z-bin map must be binary")
    out = np.zeros((steps, arr.shape[0], 1) + arr.shape[2:], dtype=np.float32)
    out[:n_bins, :, 0] = np.moveaxis(arr, 1, 0)
    return SpikeTrain(torch.from_numpy(out))


def encode_self(x, steps: int) -> torch.Tensor:
    """The continuous frame repeated at every step, as stem injection current."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    t = torch.as_tensor(_as_batch(x))
    return t.unsqueeze(0).expand(steps, *t.shape).contiguous()


def input_channels(kind: EncoderKind | str, frame_channels: int = 11) -> int:
    """Stem input width for an encoder (z-axis: 5 primary currents + 1 bin plane)."""
    return N_PRIMARY + 1 if EncoderKind(kind) is EncoderKind.ZAXIS else frame_channels


def network_input(kind: EncoderKind | str, frame, steps: int,
                  rng: RngStream | None = None) -> torch.Tensor:
    """Per-step stem input (T, B, C, H, W) for an 11-channel frame batch."""
    kind = EncoderKind(kind)
    arr = _as_batch(frame)
    if kind is EncoderKind.SELF:
        return encode_self(arr, steps)
    if kind is EncoderKind.POISSON:
        if rng is None:
            raise ConfigError("Poisson coding needs an RngStream")
        return encode_poisson(arr, steps, rng).data
    if kind is EncoderKind.LATENCY:
        return encode_latency(arr, steps).data
    planes = encode_zaxis(arr[:, N_PRIMARY:], steps).data
    primary = torch.from_numpy(arr[:, :N_PRIMARY]).unsqueeze(0).expand(steps, -1, -1, -1, -1)
    return torch.cat([primary, planes], dim=2)
