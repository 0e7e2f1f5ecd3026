"""``spikegrid`` command line: ingest, encode, train, infer, energy, selftest.

Exit status is 0 on success, 1 on a validation error (bad flags, config,
shapes) and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .bev import BevConfig, build_frame, load_pointcloud
from .core import ConfigError, DimensionError, RngStream, load_tensor, save_tensor, stream_id
from .decode import DecodeConfig, write_detections
from .encoding import EncoderKind, network_input
from .energy import EnergyConstants, build_report, read_rates, table3_rates
from .network import NetworkGraph, build_canonical

log = logging.getLogger("spikegrid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ingest(a) -> None:
    bev = cfgmod.load(a.config).bev
    if a.scale != 1:
        bev = BevConfig.scaled(a.scale, **{f.name: getattr(bev, f.name) for f in fields(BevConfig)})
    pc = load_pointcloud(Path(a.input).read_bytes())
    frame = build_frame(pc, bev)
    n = save_tensor(a.output, frame.combined[None])
    log.info("%d points -> %s (%d bytes)", len(pc), a.output, n)


def _encode(a) -> None:
    frame = load_tensor(a.frame)
    if frame.ndim != 4 or frame.shape[1] != 11:
        raise DimensionError(f"expected a (B, 11, H, W) frame, got {frame.shape}")
    x = network_input(a.encoder, frame, a.steps, RngStream(a.seed, stream_id("cli.encode")))
    arr = x.numpy()
    if a.stats:
        binary = a.encoder != EncoderKind.SELF.value
        print(f"encoder={a.encoder} steps={a.steps} shape={'x'.join(map(str, arr.shape))}")
        print(f"{'rate' if binary else 'mean_current'}={arr.mean():.6f}")
        if binary:
            per_step = arr.reshape(arr.shape[0], -1).mean(axis=1)
            print("per_step=" + ",".join(f"{v:.6f}" for v in per_step))
    if a.output:
        # BEVT is rank 4: steps and batch are folded into the leading axis
        save_tensor(a.output, arr.reshape(-1, *arr.shape[2:]))


def _train_overrides(a) -> dict:
    keys = ("epochs", "steps_per_epoch", "batch", "lr", "seed", "scale", "steps", "encoder",
            "readout", "n_objects", "threshold")
    return {"train": {k: getattr(a, k) for k in keys if getattr(a, k) is not None}}


def _train(a) -> None:
    from .plotting import plot_firing_rate  # noqa: F401  (fail early if matplotlib is missing)
    from .train import fit

    run = cfgmod.load(a.config, _train_overrides(a))
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfgmod.dump(run))
    res = fit(run.train, out)
    last = res.epoch_log[-1]
    print(f"trained {run.train.total_steps} steps: kp_loss {last['kp_loss']:.4f}, "
          f"firing rate {res.initial_rate:.4f} -> {last['mean_firing_rate']:.4f}; "
          f"checkpoint {res.checkpoint}")


def _frames_for(a, cfg):
    from .scenes import batch_frames
    from .train import heldout_scenes

    if a.frame:
        frames = np.concatenate([load_tensor(p) for p in a.frame])
        return frames, [Path(p).stem for p in a.frame]
    scenes = heldout_scenes(cfg, a.synthetic, tag=f"cli.{a.seed}")
    return batch_frames(scenes), [str(i) for i in range(len(scenes))]


def _infer(a) -> None:
    from .train import configure_threads, frame_detections, load_model, predict

    configure_threads()
    model, cfg, _ = load_model(a.checkpoint)
    frames, ids = _frames_for(a, cfg)
    g = model.graph
    if frames.shape[1:] != (11, g.grid, g.grid):
        raise DimensionError(f"frames are {frames.shape[1:]}, checkpoint expects (11, {g.grid}, {g.grid})")
    dc = DecodeConfig(threshold=a.threshold)
    rows = []
    for start in range(0, len(frames), 4):
        out = predict(model, cfg, frames[start : start + 4], f"cli.infer.{start}")
        rows += list(zip(ids[start : start + 4], frame_detections(out, a.variant, dc)))
    write_detections(a.output, rows)
    print(f"{sum(len(d) for _, d in rows)} detections in {len(rows)} frame(s) -> {a.output}")


def _measured_rates(a):
    from .scenes import batch_frames
    from .train import configure_threads, heldout_scenes, load_model, predict

    configure_threads()
    model, cfg, _ = load_model(a.checkpoint)
    scenes = heldout_scenes(cfg, a.frames, tag="energy")
    totals = {}
    for start in range(0, len(scenes), 4):
        out = predict(model, cfg, batch_frames(scenes[start : start + 4]), f"energy.{start}")
        n = len(scenes[start : start + 4])
        for b, r in out.stats.block_rates.items():
            totals[b] = totals.get(b, 0.0) + r * n
    header = [f"rates measured on {len(scenes)} synthetic held-out scenes "
              f"(seed {cfg.seed}, scale {cfg.scale}, T={cfg.steps}, encoder {cfg.encoder})",
              f"checkpoint {a.checkpoint}"]
    return model.graph, {b: v / len(scenes) for b, v in totals.items()}, header


def _energy(a) -> None:
    from .plotting import plot_energy

    header = []
    if a.checkpoint:
        graph, rates, header = _measured_rates(a)
    else:
        if a.graph:
            graph = NetworkGraph.from_text(Path(a.graph).read_text())
        elif a.canonical:
            graph = build_canonical()
        else:
            raise ConfigError("choose a graph: --canonical, --graph FILE or --checkpoint FILE")
        if a.table3:
            rates = table3_rates()
            header.append("firing rates: reference per-block values for the trained network")
        elif a.rates:
            rates = read_rates(a.rates)
            header.append(f"firing rates: {a.rates}")
        else:
            raise ConfigError("supply firing rates with --rates FILE or --table3")
    if a.export_graph:
        Path(a.export_graph).write_text(graph.to_text())
    header.append(f"graph: {graph.grid}x{graph.grid} input, scale {graph.scale}, T={graph.steps}")
    report = build_report(graph, rates, EnergyConstants(steps=graph.steps), header)
    out = Path(a.output)
    report.write_csv(out)
    plot_energy(report, out.with_suffix(".png"))
    t = report.total
    print(f"total: E_snn {t.e_snn_uj:.2f} uJ, E_cnn {t.e_cnn_uj:.2f} uJ, ratio {t.ratio:.2f}x "
          f"(hardware extrapolation {report.hardware_extrapolation:.1f}x) -> {out}")


def _selftest(a) -> int:
    from . import selftest

    ok = selftest.run()
    if a.full:
        from .train import gradient_check, relative_error

        recs = gradient_check(per_kind=a.probes)
        worst = max(relative_error(r["analytic"], r["numeric"]) for r in recs)
        ok &= worst <= 0.02
        print(f"{'PASS' if worst <= 0.02 else 'FAIL'}  bptt gradient check: "
              f"{len(recs)} probes, max rel err {worst:.2e}")
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spikegrid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="point-cloud .bin -> BEVT frame")
    s.add_argument("input")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--config")
    s.add_argument("--scale", type=int, default=1, choices=(1, 2, 4, 8))
    s.set_defaults(fn=_ingest)

    s = sub.add_parser("encode", help="BEVT frame -> spike train (or stats)")
    s.add_argument("frame")
    s.add_argument("--encoder", choices=[e.value for e in EncoderKind], default="self")
    s.add_argument("--steps", type=int, default=13)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--stats", action="store_true")
    s.add_argument("-o", "--output")
    s.set_defaults(fn=_encode)

    s = sub.add_parser("train", help="train on synthetic scenes")
    s.add_argument("--config")
    s.add_argument("--out", default="run")
    for flag, typ in (("epochs", int), ("steps-per-epoch", int), ("batch", int), ("lr", float),
                      ("seed", int), ("scale", int), ("steps", int), ("n-objects", int),
                      ("threshold", float)):
        s.add_argument(f"--{flag}", type=typ)
    s.add_argument("--encoder", choices=[e.value for e in EncoderKind])
    s.add_argument("--readout", choices=("spike", "vmem", "both"))
    s.set_defaults(fn=_train)

    s = sub.add_parser("infer", help="checkpoint + frames -> detections CSV")
    s.add_argument("checkpoint")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--frame", nargs="+")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N held-out scenes")
    s.add_argument("--variant", choices=("vmem", "spike"), default="spike")
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", default="detections.csv")
    s.set_defaults(fn=_infer)

    s = sub.add_parser("energy", help="block-wise energy report")
    s.add_argument("--canonical", action="store_true", help="full-resolution reconstructed graph")
    s.add_argument("--graph", help="graph description file")
    s.add_argument("--checkpoint", help="measure rates with a trained model")
    s.add_argument("--frames", type=int, default=20)
    rs = s.add_mutually_exclusive_group()
    rs.add_argument("--rates", help="CSV with block,rate columns")
    rs.add_argument("--table3", action="store_true", help="reference per-block rates")
    s.add_argument("--export-graph", metavar="FILE")
    s.add_argument("-o", "--output", default="energy_report.csv")
    s.set_defaults(fn=_energy)

    s = sub.add_parser("selftest", help="built-in oracle and golden checks")
    s.add_argument("--full", action="store_true", help="include the BPTT gradient check")
    s.add_argument("--probes", type=int, default=20)
    s.set_defaults(fn=_selftest)
    return p


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from .train import configure_threads

        configure_threads()
        torch.manual_seed(getattr(a, "seed", 0) or 0)
        rc = a.fn(a)
        return rc if isinstance(rc, int) else 0
    except (ConfigError, DimensionError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, FloatingPointError, AssertionError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
