"""Surrogate-gradient BPTT training on synthetic scenes."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .bev import BevConfig
from .core import ConfigError, RngStream, load_checkpoint, save_checkpoint, stream_id
from .decode import DecodeConfig, assemble
from .encoding import EncoderKind, input_channels, network_input
from .losses import (GroundTruth, KpLossConfig, box_loss, box_map_loss, exact_clamp, focal_heatmap,
                     kp_loss, masked_dice, roi_mask, rot_logit_loss, rot_loss)
from .network import NetOutput, SpikingUNet, build_canonical
from .scenes import SyntheticScene, batch_frames, batch_truth, gen_scene

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
READOUTS = ("spike", "vmem", "both")
METRIC_COLUMNS = ["epoch", "kp_loss", "box_loss", "rot_loss", "mean_firing_rate", "lr"]
STEP_COLUMNS = ["step", "epoch", "lr", "kp_loss", "box_loss", "rot_loss", "vmem_kp_loss",
                "vmem_box_loss", "vmem_rot_loss", "total_loss", "mean_firing_rate", "grad_norm"]


@dataclass
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 25
    batch: int = 4
    lr: float = 1e-3
    clip_norm: float = 1.0
    restart_period: float = 10.0  # epochs
    restart_mult: float = 2.0
    seed: int = 0
    scale: int = 8
    steps: int = 13
    encoder: str = "self"
    n_objects: int = 3
    readout: str = "both"
    init_gain: float = 2.0
    threshold: float = 0.5  # initial U_thr; sets the starting firing rate
    beta: float = 0.9
    surrogate_k: float = 2.0
    per_channel: bool = False
    box_k: int = 3
    smoothing: float = 0.1
    e_gate: int | None = None  # default: first 20% of epochs
    kp: KpLossConfig = field(default_factory=KpLossConfig)

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.steps < 2:
            raise ConfigError("steps (T) must be >= 2")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch < 1:
            raise ConfigError("epochs, steps_per_epoch and batch must be >= 1")
        if self.restart_period <= 0 or self.restart_mult < 1:
            raise ConfigError("restart_period > 0 and restart_mult >= 1 required")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}")
        if self.scale not in (1, 2, 4, 8):
            raise ConfigError("scale must be 1, 2, 4 or 8")
        EncoderKind(self.encoder)
        if self.e_gate is None:
            self.e_gate = math.ceil(0.2 * self.epochs)
        self.kp.e_gate = self.e_gate

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "kp"}
        d["kp"] = asdict(self.kp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        kp = KpLossConfig(**d.pop("kp", {}))
        return cls(kp=kp, **d)


def configure_threads() -> int:
    """Honour ``SPIKEGRID_THREADS`` and pin deterministic kernels."""
    n = os.environ.get("SPIKEGRID_THREADS")
    if n:
        try:
            threads = int(n)
        except ValueError:
            raise ConfigError(f"SPIKEGRID_THREADS must be an integer, got {n!r}") from None
        if threads < 1:
            raise ConfigError("SPIKEGRID_THREADS must be >= 1")
        torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    return torch.get_num_threads()


def cosine_lr(epoch: float, lr_max: float, period: float, mult: float, lr_min: float = 0.0) -> float:
    """Cosine annealing with warm restarts at ``period * mult**n`` boundaries."""
    t, p = epoch, period
    while t >= p:
        t -= p
        p *= mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / p))


def global_grad_norm(params) -> float:
    sq = [float(p.grad.detach().double().pow(2).sum()) for p in params if p.grad is not None]
    return math.sqrt(sum(sq))


def clip_global_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their joint norm is at most ``max_norm``; returns the raw norm."""
    params = list(params)
    norm = global_grad_norm(params)
    scale = min(1.0, max_norm / (norm + 1e-12))
    if scale < 1.0:
        for p in params:
            if p.grad is not None:
                p.grad.mul_(scale)
    return norm


def bptt_backward(loss: torch.Tensor, model: torch.nn.Module) -> None:
    """Reverse pass through the unrolled graph; parameters that the loss ignores get zeros."""
    if loss.grad_fn is None:
        raise RuntimeError("loss carries no autograd history; the forward state was not retained")
    for p in model.parameters():
        p.grad = None
    loss.backward()
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def check_finite_grads(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise FloatingPointError(f"non-finite gradient in {name}")


def optimizer_step(model, opt: torch.optim.Optimizer, cfg: TrainConfig, lr: float) -> float:
    check_finite_grads(model)
    norm = clip_global_norm(model.parameters(), cfg.clip_norm)
    for g in opt.param_groups:
        g["lr"] = lr
    opt.step()
    return norm


def build_model(cfg: TrainConfig, dtype=torch.float32) -> SpikingUNet:
    graph = build_canonical(cfg.scale, input_channels(cfg.encoder), cfg.steps)
    model = SpikingUNet(graph, beta=cfg.beta, threshold=cfg.threshold, k=cfg.surrogate_k,
                        per_channel=cfg.per_channel, seed=cfg.seed, init_gain=cfg.init_gain)
    return model.to(dtype)


@dataclass
class LossParts:
    kp: torch.Tensor
    box: torch.Tensor
    rot: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.kp + self.box + self.rot

    def __add__(self, other: "LossParts") -> "LossParts":
        return LossParts(self.kp + other.kp, self.box + other.box, self.rot + other.rot)


def spike_losses(out: NetOutput, gt: GroundTruth, cfg: TrainConfig, epoch: int) -> LossParts:
    s = out.spikes
    return LossParts(kp_loss(s["keypoint"], gt, cfg.kp, epoch),
                     box_loss(s["box"], gt, cfg.box_k),
                     rot_loss(s["rotation"], gt, smoothing=cfg.smoothing))


def vmem_losses(out: NetOutput, gt: GroundTruth, cfg: TrainConfig, epoch: int) -> LossParts:
    """Same objectives on the membrane readouts; the keypoint map is squashed first."""
    m = out.membrane
    p = torch.sigmoid(m["keypoint"])
    kp = focal_heatmap(p, gt.kp_heatmap, cfg.kp.alpha, cfg.kp.beta)
    if epoch >= cfg.kp.e_gate:
        roi = roi_mask(gt.kp_mask, cfg.kp.k)
        kp = kp + cfg.kp.lambda_d * masked_dice(p, gt.kp_heatmap, roi, cfg.kp.eps)
    return LossParts(kp, box_map_loss(m["box"], gt, cfg.box_k),
                     rot_logit_loss(m["rotation"], gt, smoothing=cfg.smoothing))


def readout_losses(out: NetOutput, gt: GroundTruth, cfg: TrainConfig,
                   epoch: int) -> dict[str, LossParts]:
    """Loss terms per trained readout (``spike`` and/or ``vmem``)."""
    parts = {}
    if cfg.readout in ("spike", "both"):
        parts["spike"] = spike_losses(out, gt, cfg, epoch)
    if cfg.readout in ("vmem", "both"):
        parts["vmem"] = vmem_losses(out, gt, cfg, epoch)
    return parts


def training_loss(out: NetOutput, gt: GroundTruth, cfg: TrainConfig, epoch: int) -> LossParts:
    parts = list(readout_losses(out, gt, cfg, epoch).values())
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def scene_batch(cfg: TrainConfig, bev: BevConfig, tag: str, index: int) -> list[SyntheticScene]:
    return [gen_scene(RngStream(cfg.seed, stream_id(f"{tag}.{index * cfg.batch + i}")), bev,
                      cfg.n_objects) for i in range(cfg.batch)]


def heldout_scenes(cfg: TrainConfig, n: int = 20, tag: str = "heldout") -> list[SyntheticScene]:
    bev = BevConfig.scaled(cfg.scale)
    return [gen_scene(RngStream(cfg.seed, stream_id(f"{tag}.{i}")), bev, cfg.n_objects)
            for i in range(n)]


def encode_batch(cfg: TrainConfig, frames: np.ndarray, tag: str) -> torch.Tensor:
    rng = RngStream(cfg.seed, stream_id(f"encode.{tag}"))
    return torch.as_tensor(network_input(cfg.encoder, frames, cfg.steps, rng))


@dataclass
class FitResult:
    model: SpikingUNet
    step_log: list[dict]
    epoch_log: list[dict]
    initial_rate: float
    checkpoint: Path | None = None


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_fmt(r[c]) for c in columns])


def checkpoint_meta(cfg: TrainConfig, **extra) -> dict:
    return {"format": "spikegrid", "version": CHECKPOINT_VERSION, "scale": cfg.scale,
            "steps": cfg.steps, "encoder": cfg.encoder, "train": cfg.to_dict(), **extra}


def save_model(path, model: SpikingUNet, cfg: TrainConfig, **extra) -> None:
    save_checkpoint(path, model.named_blobs(), checkpoint_meta(cfg, **extra))


def load_model(path) -> tuple[SpikingUNet, TrainConfig, dict]:
    blobs, meta = load_checkpoint(path)
    if meta.get("format") != "spikegrid" or meta.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint (format {meta.get('format')!r}, "
                          f"version {meta.get('version')!r})")
    cfg = TrainConfig.from_dict(meta["train"])
    model = build_model(cfg)
    model.load_blobs(blobs)
    return model, cfg, meta


def fit(cfg: TrainConfig, out_dir=None, progress=None) -> FitResult:
    """Train on freshly generated scenes; writes metrics, checkpoint and figure to ``out_dir``."""
    configure_threads()
    torch.manual_seed(cfg.seed)
    bev = BevConfig.scaled(cfg.scale)
    model = build_model(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_good = {k: v.copy() for k, v in model.named_blobs().items()}

    step_log: list[dict] = []
    epoch_log: list[dict] = []
    initial_rate = None
    for epoch in range(cfg.epochs):
        rows = []
        for i in range(cfg.steps_per_epoch):
            step = epoch * cfg.steps_per_epoch + i
            lr = cosine_lr(step / cfg.steps_per_epoch, cfg.lr, cfg.restart_period, cfg.restart_mult)
            scenes = scene_batch(cfg, bev, "train", step)
            x = encode_batch(cfg, batch_frames(scenes), f"train.{step}")
            out = model(x)
            parts = readout_losses(out, batch_truth(scenes), cfg, epoch)
            loss = sum(p.total for p in parts.values())
            if not bool(torch.isfinite(loss)):
                _abort(model, cfg, out_dir, last_good, step, "loss is not finite")
            bptt_backward(loss, model)
            try:
                norm = optimizer_step(model, opt, cfg, lr)
            except FloatingPointError as exc:
                _abort(model, cfg, out_dir, last_good, step, str(exc))
            last_good = {k: v.copy() for k, v in model.named_blobs().items()}
            rate = out.stats.mean_rate
            if initial_rate is None:
                initial_rate = rate
            row = {"step": step, "epoch": epoch, "lr": lr, "total_loss": float(loss.detach()),
                   "mean_firing_rate": rate, "grad_norm": norm}
            # the metric columns follow the spike readout whenever it is trained
            main = parts.get("spike", parts.get("vmem"))
            vm = parts.get("vmem")
            for prefix, lp in (("", main), ("vmem_", vm)):
                for name in ("kp", "box", "rot"):
                    row[f"{prefix}{name}_loss"] = float(getattr(lp, name).detach()) if lp else math.nan
            rows.append(row)
            step_log.append(row)
            if progress:
                progress(row)
        epoch_log.append({"epoch": epoch, "lr": rows[-1]["lr"],
                          **{k: float(np.mean([r[k] for r in rows]))
                             for k in ("kp_loss", "box_loss", "rot_loss", "mean_firing_rate")}})
        log.info("epoch %d kp %.4f box %.4f rot %.4f rate %.4f", epoch, epoch_log[-1]["kp_loss"],
                 epoch_log[-1]["box_loss"], epoch_log[-1]["rot_loss"],
                 epoch_log[-1]["mean_firing_rate"])

    result = FitResult(model, step_log, epoch_log, initial_rate)
    if out_dir is not None:
        write_csv(out_dir / "metrics.csv", METRIC_COLUMNS, epoch_log)
        write_csv(out_dir / "steps.csv", STEP_COLUMNS, step_log)
        result.checkpoint = out_dir / "model.sgck"
        save_model(result.checkpoint, model, cfg, step=cfg.total_steps)
        from .plotting import plot_firing_rate
        plot_firing_rate(epoch_log, out_dir / "firing_rate.png", initial_rate)
    return result


def _abort(model, cfg, out_dir, last_good, step, reason):
    if out_dir is not None:
        save_checkpoint(out_dir / "last_good.sgck", last_good,
                        checkpoint_meta(cfg, step=step, aborted=reason))
    raise FloatingPointError(f"training diverged at step {step}: {reason}")


@torch.no_grad()
def predict(model: SpikingUNet, cfg: TrainConfig, frames: np.ndarray, tag: str = "infer") -> NetOutput:
    model.eval()
    return model(encode_batch(cfg, frames, tag))


def frame_detections(out: NetOutput, variant: str, decode_cfg: DecodeConfig | None = None):
    """Per-frame detection lists from a batched network output."""
    if variant == "spike":
        maps = {h: v.mean(dim=0) for h, v in out.spikes.items()}
    elif variant == "vmem":
        maps = out.membrane
    else:
        raise ConfigError(f"unknown readout variant {variant!r}")
    B = maps["keypoint"].shape[0]
    return [assemble(maps["keypoint"][b].numpy(), maps["box"][b].numpy(),
                     maps["rotation"][b].numpy(), variant, decode_cfg) for b in range(B)]


def match_count(objects, detections, radius: float = 2.0) -> int:
    """Objects claimed by a distinct detection within ``radius`` cells (greedy, closest first)."""
    pairs = []
    for i, o in enumerate(objects):
        for j, d in enumerate(detections):
            dist = math.hypot(o.row - d.row, o.col - d.col)
            if dist <= radius:
                pairs.append((dist, i, j))
    used_o, used_d, n = set(), set(), 0
    for _, i, j in sorted(pairs):
        if i not in used_o and j not in used_d:
            used_o.add(i)
            used_d.add(j)
            n += 1
    return n


def evaluate_recall(model: SpikingUNet, cfg: TrainConfig, scenes: list[SyntheticScene],
                    variant: str, radius: float = 2.0, batch: int = 4) -> float:
    found = total = 0
    for start in range(0, len(scenes), batch):
        chunk = scenes[start : start + batch]
        out = predict(model, cfg, batch_frames(chunk), f"eval.{start}")
        for scene, dets in zip(chunk, frame_detections(out, variant)):
            found += match_count(scene.objects, dets, radius)
            total += len(scene.objects)
    return found / total if total else 1.0


def gradient_check(cfg: TrainConfig | None = None, per_kind: int = 20, h: float = 1e-3,
                   seed: int = 0) -> list[dict]:
    """Autograd vs central differences on the relaxed-spike loss, in float64.

    Samples ``per_kind`` scalar parameters from each of conv, tconv,
    groupnorm and LIF. Returns one record per probe.

    The focal clamp is made exact for the check, since its straight-through
    gradient is deliberately not the derivative of the clamped value. The
    default point uses threshold 1.0: at 0.5 the keypoint loss is curved
    enough that a 1e-3 step has visible truncation error.
    """
    cfg = cfg or TrainConfig(batch=1, threshold=1.0)
    with exact_clamp():
        return _gradient_probes(cfg, per_kind, h, seed)


def _gradient_probes(cfg: TrainConfig, per_kind: int, h: float, seed: int) -> list[dict]:
    model = build_model(cfg, torch.float64)
    model.set_relaxed(True)
    bev = BevConfig.scaled(cfg.scale)
    scenes = scene_batch(cfg, bev, "gradcheck", 0)
    gt = batch_truth(scenes)
    gt = GroundTruth(gt.kp_heatmap.double(), gt.box_dims.double(), gt.rot_bins)
    x = encode_batch(cfg, batch_frames(scenes), "gradcheck").double()
    epoch = cfg.kp.e_gate  # include the Dice term

    def loss_fn():
        return training_loss(model(x), gt, cfg, epoch).total

    bptt_backward(loss_fn(), model)
    groups = {"conv": [], "tconv": [], "groupnorm": [], "lif": []}
    for key, syn in model.synapses.items():
        groups[syn.spec.kind].append((f"synapses.{key}.weight", syn.weight))
    for key, gn in model.norms.items():
        groups["groupnorm"] += [(f"norms.{key}.weight", gn.weight), (f"norms.{key}.bias", gn.bias)]
    for key, lif in model.neurons.items():
        groups["lif"] += [(f"neurons.{key}.beta_raw", lif.beta_raw),
                          (f"neurons.{key}.thr_raw", lif.thr_raw)]

    rng = np.random.default_rng(seed)
    records = []
    with torch.no_grad():
        for kind, params in groups.items():
            sizes = np.array([p.numel() for _, p in params])
            for _ in range(per_kind):
                pi = rng.choice(len(params), p=sizes / sizes.sum())
                name, p = params[pi]
                idx = int(rng.integers(p.numel()))
                flat = p.view(-1)
                analytic = float(p.grad.view(-1)[idx])
                orig = float(flat[idx])
                flat[idx] = orig + h
                lp = float(loss_fn())
                flat[idx] = orig - h
                lm = float(loss_fn())
                flat[idx] = orig
                numeric = (lp - lm) / (2 * h)
                records.append({"kind": kind, "param": name, "index": idx,
                                "analytic": analytic, "numeric": numeric})
    return records


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
