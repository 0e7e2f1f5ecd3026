"""Fast built-in oracle checks, run by ``spikegrid selftest``."""

from __future__ import annotations

import io
import math
from typing import Callable

import numpy as np
import torch

from .core import RngStream, deserialize_tensor, serialize_tensor
from .encoding import encode_poisson
from .energy import build_report, energy_ratio, table3_rates
from .losses import focal_heatmap
from .network import build_canonical, mac_count
from .neuron import lif_step, surrogate_grad

GOLDEN_MACS = {
    "Stem": 162_201_600, "DB1": 2_785_280_000, "DB2": 3_632_332_800, "DB3": 4_066_918_400,
    "DB4": 4_286_976_000, "UB4_4": 8_659_763_200, "UB3_4": 16_472_473_600,
    "UB2_3": 14_981_529_600, "UB1_2": 12_215_910_400, "Keypoint": 532_070_400,
    "Box": 534_528_000, "Rotation": 568_934_400,
}
GOLDEN_TOTAL_MACS = 68_898_918_400


def _macs():
    g = build_canonical()
    got = {b: sum(mac_count(l) for l in g.synaptic_layers(b)) for b in g.blocks}
    bad = {b: got[b] for b in GOLDEN_MACS if got[b] != GOLDEN_MACS[b]}
    total = sum(got.values())
    return not bad and total == GOLDEN_TOTAL_MACS, f"total {total:,}" + (f" mismatch {bad}" if bad else "")


def _energy():
    rep = build_report(build_canonical(), table3_rates())
    t = rep.total
    ok = (abs(t.e_snn_uj - 95170.43) / 95170.43 < 5e-3 and round(t.e_cnn_uj, 2) == 316935.02
          and abs(t.ratio - 3.33) <= 0.01 and abs(rep.hardware_extrapolation - 43) <= 1)
    return ok, f"E_snn {t.e_snn_uj:.2f} uJ, ratio {t.ratio:.2f}, x{rep.hardware_extrapolation:.1f}"


def _ratio():
    a, b = energy_ratio(0.1181, 13), energy_ratio(1.0, 1)
    return round(a, 2) == 3.33 and round(b, 2) == 5.11, f"{a:.4f}, {b:.4f}"


def _lif():
    f = torch.tensor
    s, u = lif_step(f([0.5]), f([0.3]), f(0.9), f(1.0))
    ok = s.item() == 0 and u.item() == np.float32(0.9) * np.float32(0.5) + np.float32(0.3)
    return ok, f"U' = {u.item():.6f}"


def _surrogate():
    worst = 0.0
    x = np.linspace(-3, 3, 601)
    h = 1e-4
    for k in (0.5, 1.0, 2.0, 5.0):
        # tanh(a) - tanh(b) = sinh(a - b) / (cosh a cosh b), free of cancellation
        fd = np.sinh(2 * k * h) / (np.cosh(k * (x + h)) * np.cosh(k * (x - h))) / (2 * h * k)
        got = surrogate_grad(torch.from_numpy(x), k).numpy()
        worst = max(worst, float(np.max(np.abs(got - fd) / np.maximum(np.abs(fd), 1e-12))))
    return worst < 1e-5, f"max rel err {worst:.2e}"


def _poisson():
    rng = RngStream(0, 1)
    msgs, ok = [], True
    for p in (0.1, 0.5, 0.9):
        tr = encode_poisson(np.full((1, 1, 100, 100), p, np.float32), 1, rng)
        r = tr.rate().mean().item()
        sigma = math.sqrt(p * (1 - p) / 10_000)
        ok &= abs(r - p) <= 3 * sigma
        msgs.append(f"{p}->{r:.4f}")
    return ok, ", ".join(msgs)


def _bevt():
    x = np.random.default_rng(0).standard_normal((1, 3, 5, 7)).astype(np.float32)
    buf = io.BytesIO()
    n = serialize_tensor(x, buf)
    buf.seek(0)
    return n == 24 + x.nbytes and np.array_equal(deserialize_tensor(buf), x), f"{n} bytes"


def _focal():
    v = focal_heatmap(torch.tensor([[0.5]]), torch.tensor([[1.0]])).item()
    return abs(v - 0.25 * math.log(2)) < 1e-6, f"{v:.6f}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "mac golden": _macs,
    "energy golden": _energy,
    "ratio spot checks": _ratio,
    "lif step": _lif,
    "surrogate finite difference": _surrogate,
    "poisson statistics": _poisson,
    "bevt round trip": _bevt,
    "focal closed form": _focal,
}


def run(out=print) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        ok, detail = fn()
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
