"""Block-wise synaptic-operation energy: spiking network vs. an equivalent CNN.

Per synaptic layer ``E_cnn = MACs * E_mac`` and
``E_snn = MACs * rate * T * E_ac``, where ``rate`` is the mean firing
rate of the presynaptic population. Normalisation, membrane updates and
resets are not counted.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources

from .network import NetworkGraph, mac_count

PJ_PER_UJ = 1e6

STAGES = (
    ("Input", ("Stem",)),
    ("Encoder", ("DB1", "DB2", "DB3", "DB4")),
    ("Decoder", ("UB4_4", "UB3_4", "UB2_3", "UB1_2")),
    ("Output", ("Keypoint", "Box", "Rotation")),
)


@dataclass(frozen=True)
class EnergyConstants:
    e_mac: float = 4.6  # pJ
    e_ac: float = 0.9  # pJ
    steps: int = 13


def snn_energy(macs: float, rate: float, steps: int = 13,
               consts: EnergyConstants = EnergyConstants()) -> float:
    """Picojoules for ``macs`` synapses driven at ``rate`` over ``steps``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"firing rate {rate} outside [0, 1]")
    return macs * rate * steps * consts.e_ac


def cnn_energy(macs: float, consts: EnergyConstants = EnergyConstants()) -> float:
    return macs * consts.e_mac


def energy_ratio(rate: float, steps: int = 13, consts: EnergyConstants = EnergyConstants()) -> float:
    """E_cnn / E_snn; ``math.inf`` for a silent network."""
    if rate <= 0:
        return math.inf
    return consts.e_mac / (rate * steps * consts.e_ac)


def format_ratio(ratio: float) -> str:
    return "inf" if math.isinf(ratio) else f"{ratio:.2f}"


@dataclass
class EnergyRow:
    stage: str
    block: str
    input_shape: str
    macs: int
    rate: float
    e_snn_uj: float
    e_cnn_uj: float
    share_snn: float = 0.0
    share_cnn: float = 0.0
    kind: str = "block"  # block | subtotal | total

    @property
    def sparsity(self) -> float:
        return 1.0 - self.rate

    @property
    def ratio(self) -> float:
        return self.e_cnn_uj / self.e_snn_uj if self.e_snn_uj > 0 else math.inf


@dataclass
class EnergyReport:
    rows: list[EnergyRow]
    consts: EnergyConstants
    header: list[str] = field(default_factory=list)

    @property
    def total(self) -> EnergyRow:
        return self.rows[-1]

    def row(self, block: str) -> EnergyRow:
        for r in self.rows:
            if r.block == block:
                return r
        raise KeyError(block)

    @property
    def hardware_extrapolation(self) -> float:
        """Single-pass CNN vs. streamed SNN: the loop ratio times T (an estimate)."""
        return self.total.ratio * self.consts.steps

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            for line in self.header:
                fh.write(f"# {line}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["stage", "block", "input", "macs", "fr", "sparsity", "e_snn_uj",
                         "e_cnn_uj", "share_snn_pct", "share_cnn_pct", "cnn_snn_ratio"])
            for r in self.rows:
                wr.writerow([r.stage, r.block, r.input_shape, r.macs, f"{r.rate:.4f}",
                             f"{r.sparsity:.4f}", f"{r.e_snn_uj:.4f}", f"{r.e_cnn_uj:.4f}",
                             f"{r.share_snn:.2f}", f"{r.share_cnn:.2f}", format_ratio(r.ratio)])
            fh.write(f"# hardware extrapolation (ratio x T, estimate): "
                     f"{self.hardware_extrapolation:.1f}x\n")


def _aggregate(stage: str, name: str, rows: list[EnergyRow], kind: str) -> EnergyRow:
    macs = sum(r.macs for r in rows)
    rate = sum(r.macs * r.rate for r in rows) / macs if macs else 0.0
    return EnergyRow(stage, name, "---", macs, rate, sum(r.e_snn_uj for r in rows),
                     sum(r.e_cnn_uj for r in rows), kind=kind)


def build_report(graph: NetworkGraph, rates: dict[str, float],
                 consts: EnergyConstants | None = None, header=None) -> EnergyReport:
    """Block, stage-subtotal and total rows; aggregate rates are MAC-weighted."""
    consts = consts or EnergyConstants(steps=graph.steps)
    missing = [b for b in graph.blocks if b not in rates]
    if missing:
        raise KeyError(f"no firing rate for block(s): {', '.join(missing)}")
    blocks, rows = [], []
    for stage, members in STAGES:
        stage_rows = []
        for b in members:
            if b not in graph.blocks:
                continue
            macs = sum(mac_count(l) for l in graph.synaptic_layers(b))
            c, h, w = graph.block_input(b)
            r = EnergyRow(stage, b, f"{c}x{h}x{w}", macs, rates[b],
                          snn_energy(macs, rates[b], consts.steps, consts) / PJ_PER_UJ,
                          cnn_energy(macs, consts) / PJ_PER_UJ)
            stage_rows.append(r)
        rows.extend(stage_rows)
        blocks.extend(stage_rows)
        if len(stage_rows) > 1:
            rows.append(_aggregate(stage, "Subtotal", stage_rows, "subtotal"))
    total = _aggregate("", "Total", blocks, "total")
    rows.append(total)
    for r in rows:
        r.share_snn = 100 * r.e_snn_uj / total.e_snn_uj if total.e_snn_uj else 0.0
        r.share_cnn = 100 * r.e_cnn_uj / total.e_cnn_uj if total.e_cnn_uj else 0.0
    return EnergyReport(rows, consts, list(header or []))


def table3_rates() -> dict[str, float]:
    """Reference per-block firing rates for the trained full-scale network."""
    return read_rates(resources.files("spikegrid").joinpath("data/table3_rates.csv"))


def read_rates(path) -> dict[str, float]:
    rates = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(line for line in fh if not line.startswith("#")):
            rates[row["block"]] = float(row["rate"])
    return rates


def write_rates(path, rates: dict[str, float], header=None) -> None:
    with open(path, "w", newline="") as fh:
        for line in header or []:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["block", "rate"])
        for b, r in rates.items():
            wr.writerow([b, f"{r:.6f}"])
