"""Leaky integrate-and-fire neurons with a tanh surrogate gradient.

Discrete dynamics (rest potential 0, subtract-and-continue reset)::

    S[t]   = H(U[t] - thr)              H(0) = 1
    U[t+1] = beta * U[t] + I[t+1] - S[t] * thr

The backward pass replaces dS/dU with ``1 - tanh(k x)**2``, the exact
derivative of ``tanh(k x) / k``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError

DEFAULT_K = 2.0


def surrogate_grad(x, k: float = DEFAULT_K):
    """``1 - tanh(k x)^2``, the derivative of ``tanh(k x) / k``."""
    if k <= 0:
        raise ValueError("surrogate sharpness k must be positive")
    x = torch.as_tensor(x)
    # 1 / cosh^2 equals 1 - tanh^2 without the cancellation in the tails
    return torch.cosh(k * x).pow(-2)


class _Spike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, k):
        ctx.save_for_backward(x)
        ctx.k = k
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * surrogate_grad(x, ctx.k), None


class _RelaxedSpike(torch.autograd.Function):
    """Smooth stand-in ``0.5 + tanh(k x)/k`` sharing the surrogate backward.

    Only used to verify BPTT against finite differences: with this forward
    the surrogate is the true derivative.
    """

    @staticmethod
    def forward(ctx, x, k):
        ctx.save_for_backward(x)
        ctx.k = k
        return 0.5 + torch.tanh(k * x) / k

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        return grad_out * surrogate_grad(x, ctx.k), None


def spike(x: torch.Tensor, k: float = DEFAULT_K, relaxed: bool = False) -> torch.Tensor:
    fn = _RelaxedSpike if relaxed else _Spike
    return fn.apply(x, k)


def lif_step(u, current, beta, thr, k: float = DEFAULT_K, relaxed: bool = False):
    """One update: spike from the present state, then leak, integrate, reset.

    Returns ``(spikes, next_u)``.
    """
    u = torch.as_tensor(u)
    current = torch.as_tensor(current, dtype=u.dtype)
    if u.shape != current.shape:
        raise ValueError(f"state {tuple(u.shape)} and input {tuple(current.shape)} differ")
    if not bool(torch.isfinite(current).all()):
        raise FloatingPointError("non-finite input current")
    beta = torch.as_tensor(beta, dtype=u.dtype)
    thr = torch.as_tensor(thr, dtype=u.dtype)
    s = spike(u - thr, k, relaxed)
    return s, beta * u + current - s * thr


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class LIF(nn.Module):
    """A layer of LIF neurons with learnable decay and threshold.

    ``beta`` is stored as a logit and ``threshold`` through softplus, so
    unconstrained optimiser steps keep ``0 < beta < 1`` and ``thr > 0``.
    With ``spiking=False`` the layer is a plain leaky integrator whose
    membrane is read out directly (no threshold, no reset).

    Calling the layer advances one timestep and returns the spikes for the
    updated membrane, i.e. the input is integrated before the threshold
    test, as snnTorch's ``Leaky`` does.
    """

    def __init__(self, channels: int = 1, beta: float = 0.9, threshold: float = 1.0,
                 k: float = DEFAULT_K, spiking: bool = True, per_channel: bool = False):
        super().__init__()
        n = channels if per_channel else 1
        self.beta_raw = nn.Parameter(torch.full((n,), _logit(beta)))
        self.thr_raw = nn.Parameter(torch.full((n,), _softplus_inv(threshold)))
        self.k = k
        self.spiking = spiking
        self.relaxed = False
        self.reset_state()

    @property
    def beta(self) -> torch.Tensor:
        return torch.sigmoid(self.beta_raw).clamp(1e-6, 1 - 1e-6)

    @property
    def threshold(self) -> torch.Tensor:
        return F.softplus(self.thr_raw).clamp_min(1e-6)

    def _bcast(self, p: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return p.view(1, -1, *([1] * (like.ndim - 2))) if like.ndim >= 2 else p

    def reset_state(self):
        self.u = None
        self.s = None
        self.spike_count = 0.0
        self.neuron_steps = 0

    def forward(self, current: torch.Tensor) -> torch.Tensor:
        beta = self._bcast(self.beta, current)
        if self.u is None:
            self.u = torch.zeros_like(current)
        if not self.spiking:
            self.u = beta * self.u + current
            return self.u
        thr = self._bcast(self.threshold, current)
        if self.s is None:
            self.s = torch.zeros_like(current)
        self.u = beta * self.u + current - self.s * thr
        self.s = spike(self.u - thr, self.k, self.relaxed)
        self.spike_count += float(self.s.detach().sum())
        self.neuron_steps += self.s.numel()
        return self.s

    def run(self, current: torch.Tensor, steps: int) -> torch.Tensor:
        """Unroll over ``steps`` timesteps stacked on the leading axis of ``current``."""
        seq = current.reshape(steps, -1, *current.shape[1:])
        out = torch.stack([self(c) for c in seq.unbind(0)])
        return out.reshape(current.shape)

    def membrane_readout(self) -> torch.Tensor:
        if self.spiking:
            raise ConfigError("membrane readout needs a non-spiking (threshold-free) layer")
        if self.u is None:
            raise RuntimeError("layer has not been run")
        return self.u

    @property
    def firing_rate(self) -> float:
        return self.spike_count / self.neuron_steps if self.neuron_steps else 0.0
