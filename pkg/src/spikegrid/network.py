"""Spiking encoder-decoder for BEV detection.

The layer plan lives in :class:`NetworkGraph` (pure data, shared with the
energy profiler); :class:`SpikingUNet` instantiates it in torch and runs
it step by step over the unrolled window.

Layer widths at full scale (320 x 320 input):

* stem   conv3x3 11->16, LIF
* DB1-4  conv5x5 Cin->Cmid | GN | LIF, conv3x3 Cmid->Cmid | GN | LIF,
         concat(block input) -> Cmid+Cin, strided conv3x3 | GN | LIF
         with Cmid = 32, 64, 128, 256 (concat widths 48, 112, 240, 496)
* UBs    tconv2x2/2 C->C | GN | LIF, concat(encoder skip),
         conv3x3 -> skip width | GN | LIF
* heads  conv3x3 48->12 | LIF, conv1x1 12->{1, 3, 31} | LIF (no GN)
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, DimensionError, RngStream, concat_channels, stream_id
from .neuron import DEFAULT_K, LIF

STEM_WIDTH = 16
DB_WIDTHS = (32, 64, 128, 256)
HEAD_WIDTH = 12
HEAD_OUTPUTS = {"keypoint": 1, "box": 3, "rotation": 31}
UB_NAMES = ("UB4_4", "UB3_4", "UB2_3", "UB1_2")
GN_GROUPS = 8
MIN_WIDTH = 4


@dataclass(frozen=True)
class LayerSpec:
    name: str
    block: str
    kind: str  # conv | tconv | groupnorm | lif | concat
    in_ch: int
    out_ch: int
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    h_in: int = 0
    w_in: int = 0
    h_out: int = 0
    w_out: int = 0
    groups: int = 0

    @property
    def synaptic(self) -> bool:
        return self.kind in ("conv", "tconv")


@dataclass
class NetworkGraph:
    layers: list[LayerSpec]
    grid: int
    in_channels: int
    steps: int = 13
    scale: int = 1
    blocks: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.blocks:
            seen = []
            for layer in self.layers:
                if layer.block not in seen:
                    seen.append(layer.block)
            self.blocks = seen

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def block_layers(self, block: str) -> list[LayerSpec]:
        return [l for l in self.layers if l.block == block]

    def synaptic_layers(self, block: str | None = None) -> list[LayerSpec]:
        return [l for l in self.layers if l.synaptic and (block is None or l.block == block)]

    def block_input(self, block: str) -> tuple[int, int, int]:
        first = self.synaptic_layers(block)[0]
        return first.in_ch, first.h_in, first.w_in

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["graph"] = {"grid": str(self.grid), "in_channels": str(self.in_channels),
                       "steps": str(self.steps), "scale": str(self.scale),
                       "blocks": ",".join(self.blocks)}
        for layer in self.layers:
            cp[f"layer {layer.name}"] = {k: str(v) for k, v in asdict(layer).items() if k != "name"}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "NetworkGraph":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        try:
            g = cp["graph"]
            layers = []
            for sec in cp.sections():
                if not sec.startswith("layer "):
                    continue
                d = dict(cp[sec])
                ints = {k: int(v) for k, v in d.items() if k not in ("block", "kind")}
                layers.append(LayerSpec(name=sec[6:], block=d["block"], kind=d["kind"], **ints))
            return cls(layers, grid=int(g["grid"]), in_channels=int(g["in_channels"]),
                       steps=int(g["steps"]), scale=int(g["scale"]),
                       blocks=g["blocks"].split(","))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"malformed graph description: {exc}") from exc


def _width(base: int, scale: int) -> int:
    return base if scale == 1 else max(MIN_WIDTH, base // scale)


def _gn_groups(channels: int) -> int:
    return math.gcd(GN_GROUPS, channels)


def build_canonical(scale: int = 1, in_channels: int = 11, steps: int = 13,
                    grid: int = 320) -> NetworkGraph:
    """Layer plan at ``grid / scale`` resolution and channel widths ``/ scale`` (min 4).

    Odd encoder resolutions round up when pooled; the matching decoder
    transposed conv is cropped back to the skip resolution.
    """
    if scale not in (1, 2, 4, 8) or grid % scale:
        raise ConfigError(f"scale must be one of 1, 2, 4, 8 and divide {grid}, got {scale}")
    H = grid // scale
    L: list[LayerSpec] = []

    def conv(name, block, cin, cout, k, hin, stride=1, hout=None, kind="conv"):
        if hout is None:
            hout = hin if stride == 1 else (hin + 1) // 2
        pad = 0 if kind == "tconv" or k == 1 else k // 2
        L.append(LayerSpec(name, block, kind, cin, cout, k, stride, pad, hin, hin, hout, hout))
        return hout

    def gn(name, block, c, h):
        L.append(LayerSpec(name, block, "groupnorm", c, c, h_in=h, w_in=h, h_out=h, w_out=h,
                           groups=_gn_groups(c)))

    def lif(name, block, c, h):
        L.append(LayerSpec(name, block, "lif", c, c, h_in=h, w_in=h, h_out=h, w_out=h))

    stem = _width(STEM_WIDTH, scale)
    conv("stem.conv", "Stem", in_channels, stem, 3, H)
    lif("stem.lif", "Stem", stem, H)

    cin, h = stem, H
    skips = []
    for i, base in enumerate(DB_WIDTHS, start=1):
        b, mid = f"DB{i}", _width(base, scale)
        conv(f"db{i}.c1", b, cin, mid, 5, h)
        gn(f"db{i}.gn1", b, mid, h)
        lif(f"db{i}.lif1", b, mid, h)
        conv(f"db{i}.c2", b, mid, mid, 3, h)
        gn(f"db{i}.gn2", b, mid, h)
        lif(f"db{i}.lif2", b, mid, h)
        cat = mid + cin
        L.append(LayerSpec(f"db{i}.cat", b, "concat", cat, cat, h_in=h, w_in=h, h_out=h, w_out=h))
        skips.append((cat, h))
        hp = conv(f"db{i}.pool", b, cat, cat, 3, h, stride=2)
        gn(f"db{i}.gnp", b, cat, hp)
        lif(f"db{i}.lifp", b, cat, hp)
        cin, h = cat, hp

    for j, b in enumerate(UB_NAMES):
        skip_c, skip_h = skips[-1 - j]
        tag = b.lower()
        conv(f"{tag}.up", b, cin, cin, 2, h, stride=2, hout=skip_h, kind="tconv")
        gn(f"{tag}.gnu", b, cin, skip_h)
        lif(f"{tag}.lifu", b, cin, skip_h)
        cat = cin + skip_c
        L.append(LayerSpec(f"{tag}.cat", b, "concat", cat, cat, h_in=skip_h, w_in=skip_h,
                           h_out=skip_h, w_out=skip_h))
        conv(f"{tag}.conv", b, cat, skip_c, 3, skip_h)
        gn(f"{tag}.gn", b, skip_c, skip_h)
        lif(f"{tag}.lif", b, skip_c, skip_h)
        cin, h = skip_c, skip_h

    hw = _width(HEAD_WIDTH, scale)
    for head, n_out in HEAD_OUTPUTS.items():
        b = head.capitalize()
        conv(f"{head}.c1", b, cin, hw, 3, h)
        lif(f"{head}.lif1", b, hw, h)
        conv(f"{head}.c2", b, hw, n_out, 1, h)
        lif(f"{head}.lif2", b, n_out, h)

    return NetworkGraph(L, grid=H, in_channels=in_channels, steps=steps, scale=scale)


def group_norm(x: torch.Tensor, groups: int, weight=None, bias=None, eps: float = 1e-5):
    """Per-sample, per-group standardisation followed by a per-channel affine map."""
    B, C = x.shape[:2]
    if C % groups:
        raise ConfigError(f"{C} channels not divisible into {groups} groups")
    g = x.reshape(B, groups, -1)
    mean = g.mean(dim=2, keepdim=True)
    var = ((g - mean) ** 2).mean(dim=2, keepdim=True)
    y = ((g - mean) / torch.sqrt(var + eps)).reshape_as(x)
    shape = (1, C) + (1,) * (x.ndim - 2)
    if weight is not None:
        y = y * weight.view(shape)
    if bias is not None:
        y = y + bias.view(shape)
    return y


class GroupNorm(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        if channels % groups:
            raise ConfigError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return group_norm(x, self.groups, self.weight, self.bias)


class Synapse(nn.Module):
    """Conv or transposed conv that also tallies presynaptic activity."""

    def __init__(self, spec: LayerSpec, bias: bool):
        super().__init__()
        self.spec = spec
        if spec.kind == "conv":
            self.weight = nn.Parameter(torch.empty(spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
        else:
            self.weight = nn.Parameter(torch.empty(spec.in_ch, spec.out_ch, spec.kernel, spec.kernel))
        self.bias = nn.Parameter(torch.zeros(spec.out_ch)) if bias else None
        self.reset_stats()

    def reset_stats(self):
        self.active = 0.0
        self.seen = 0

    def fan_in(self) -> int:
        s = self.spec
        return max(1, s.in_ch * s.kernel ** 2 // (s.stride ** 2 if s.kind == "tconv" else 1))

    def forward(self, x):
        s = self.spec
        if x.shape[1] != s.in_ch or x.shape[-2:] != (s.h_in, s.w_in):
            raise DimensionError(f"layer {s.name}: expected (*, {s.in_ch}, {s.h_in}, {s.w_in}), "
                                 f"got {tuple(x.shape)}")
        self.active += float(x.detach().sum())
        self.seen += x.numel()
        if s.kind == "conv":
            return F.conv2d(x, self.weight, self.bias, stride=s.stride, padding=s.padding)
        y = F.conv_transpose2d(x, self.weight, self.bias, stride=s.stride)
        return y[..., : s.h_out, : s.w_out]

    @property
    def rate(self) -> float:
        return self.active / self.seen if self.seen else 0.0


@dataclass
class FiringStats:
    layer_rates: dict[str, float]
    synapse_rates: dict[str, float]
    block_rates: dict[str, float]
    mean_rate: float  # MAC-weighted over synaptic layers
    neuron_rate: float  # spikes / neuron-steps over all LIF layers


@dataclass
class NetOutput:
    spikes: dict[str, torch.Tensor]  # head -> (T, B, C, H, W)
    membrane: dict[str, torch.Tensor] | None  # head -> (B, C, H, W)
    stats: FiringStats

    def rates(self) -> dict[str, torch.Tensor]:
        return {k: v.mean(dim=0) for k, v in self.spikes.items()}


class SpikingUNet(nn.Module):
    """Executable form of a :class:`NetworkGraph`.

    Each head's final current also drives a threshold-free leaky
    integrator; its last membrane value is the vmem readout.
    """

    def __init__(self, graph: NetworkGraph, beta: float = 0.9, threshold: float = 1.0,
                 k: float = DEFAULT_K, per_channel: bool = False, seed: int = 0,
                 init_gain: float = 1.0, keypoint_bias: float = 0.0):
        super().__init__()
        self.graph = graph
        self.steps = graph.steps
        self.synapses = nn.ModuleDict()
        self.norms = nn.ModuleDict()
        self.neurons = nn.ModuleDict()
        self.readouts = nn.ModuleDict()
        for i, spec in enumerate(graph.layers):
            key = spec.name.replace(".", "_")
            if spec.synaptic:
                # GN directly after a conv makes its bias redundant
                followed_by_gn = i + 1 < len(graph.layers) and graph.layers[i + 1].kind == "groupnorm"
                self.synapses[key] = Synapse(spec, bias=not followed_by_gn)
            elif spec.kind == "groupnorm":
                self.norms[key] = GroupNorm(spec.in_ch, spec.groups)
            elif spec.kind == "lif":
                self.neurons[key] = LIF(spec.in_ch, beta, threshold, k, per_channel=per_channel)
        for head in HEAD_OUTPUTS:
            self.readouts[head] = LIF(HEAD_OUTPUTS[head], beta, threshold, k, spiking=False,
                                      per_channel=per_channel)
        self.init_weights(seed, init_gain, keypoint_bias)

    def init_weights(self, seed: int, gain: float = 1.0, keypoint_bias: float = 0.0):
        for key, syn in self.synapses.items():
            rng = RngStream(seed, stream_id(key)).generator
            bound = gain * math.sqrt(3.0 / syn.fan_in())
            w = rng.uniform(-bound, bound, size=tuple(syn.weight.shape))
            with torch.no_grad():
                syn.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                if syn.bias is not None:
                    syn.bias.zero_()
        with torch.no_grad():
            self.synapses["keypoint_c2"].bias.fill_(keypoint_bias)

    def set_relaxed(self, relaxed: bool):
        for lif in self.neurons.values():
            lif.relaxed = relaxed

    def reset(self):
        for m in self.modules():
            if isinstance(m, LIF):
                m.reset_state()
            elif isinstance(m, Synapse):
                m.reset_stats()

    def _unroll(self, x, T: int, check: bool = False):
        """Layer-by-layer pass; activations are (T*B, C, H, W), time-major.

        No layer feeds back to an earlier one, so each synapse can process
        all timesteps at once and only the LIF recurrence runs step by step.
        """
        S, N, G = self.synapses, self.neurons, self.norms

        def lif(key, cur):
            s = N[key].run(cur, T)
            if check and not bool(((s == 0) | (s == 1)).all()):
                raise AssertionError(f"non-binary activation after {key}")
            return s

        s = lif("stem_lif", S["stem_conv"](x))
        skips = []
        for i in range(1, 5):
            p = f"db{i}_"
            a = lif(p + "lif1", G[p + "gn1"](S[p + "c1"](s)))
            b = lif(p + "lif2", G[p + "gn2"](S[p + "c2"](a)))
            cat = concat_channels(b, s)
            skips.append(cat)
            s = lif(p + "lifp", G[p + "gnp"](S[p + "pool"](cat)))
        for j, name in enumerate(UB_NAMES):
            p = name.lower() + "_"
            u = lif(p + "lifu", G[p + "gnu"](S[p + "up"](s)))
            cat = concat_channels(u, skips[-1 - j])
            s = lif(p + "lif", G[p + "gn"](S[p + "conv"](cat)))
        out = {}
        for head in HEAD_OUTPUTS:
            h = lif(f"{head}_lif1", S[f"{head}_c1"](s))
            cur = S[f"{head}_c2"](h)
            self.readouts[head].run(cur, T)
            out[head] = lif(f"{head}_lif2", cur)
        return out

    def forward(self, x_seq: torch.Tensor, check_binary: bool = False) -> NetOutput:
        """Run all timesteps of ``x_seq`` (T, B, C, H, W)."""
        g = self.graph
        if x_seq.ndim != 5 or x_seq.shape[2] != g.in_channels or x_seq.shape[-2:] != (g.grid, g.grid):
            raise DimensionError(f"input must be (T, B, {g.in_channels}, {g.grid}, {g.grid}), "
                                 f"got {tuple(x_seq.shape)}")
        self.reset()
        dtype = next(self.parameters()).dtype
        T, B = x_seq.shape[:2]
        out = self._unroll(x_seq.to(dtype).reshape(T * B, *x_seq.shape[2:]), T, check_binary)
        spikes = {h: v.reshape(T, B, *v.shape[1:]) for h, v in out.items()}
        membrane = {h: r.membrane_readout() for h, r in self.readouts.items()}
        return NetOutput(spikes, membrane, self.firing_stats())

    def firing_stats(self) -> FiringStats:
        layer_rates = {k: n.firing_rate for k, n in self.neurons.items()}
        syn_rates = {}
        for key, syn in self.synapses.items():
            syn_rates[key] = layer_rates["stem_lif"] if key == "stem_conv" else syn.rate
        block_rates, num, den = {}, 0.0, 0.0
        for block in self.graph.blocks:
            layers = self.graph.synaptic_layers(block)
            macs = [mac_count(l) for l in layers]
            rates = [syn_rates[l.name.replace(".", "_")] for l in layers]
            bm = sum(macs)
            block_rates[block] = sum(m * r for m, r in zip(macs, rates)) / bm
            num += sum(m * r for m, r in zip(macs, rates))
            den += bm
        spikes = sum(n.spike_count for n in self.neurons.values())
        steps = sum(n.neuron_steps for n in self.neurons.values())
        return FiringStats(layer_rates, syn_rates, block_rates, num / den,
                           spikes / steps if steps else 0.0)

    def named_blobs(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().float().numpy() for k, v in self.state_dict().items()}

    def load_blobs(self, blobs: dict[str, np.ndarray]):
        state = {k: torch.from_numpy(np.asarray(v)) for k, v in blobs.items()}
        self.load_state_dict(state)


def mac_count(layer: LayerSpec) -> int:
    """C_in * K^2 * C_out * H_out * W_out for conv/tconv; 0 for other kinds."""
    if not layer.synaptic:
        return 0
    return layer.in_ch * layer.kernel ** 2 * layer.out_ch * layer.h_out * layer.w_out
