import math

import numpy as np
import pytest
import torch

from spikegrid.bev import BevConfig
from spikegrid.core import ConfigError, RngStream, load_checkpoint
from spikegrid.scenes import DIM_BOUNDS, batch_frames, batch_truth, gen_scene
from spikegrid.train import (TrainConfig, bptt_backward, build_model, clip_global_norm,
                             cosine_lr, encode_batch, fit, load_model, match_count,
                             optimizer_step, predict, training_loss)
import spikegrid.train as train_mod

TINY = dict(epochs=2, steps_per_epoch=2, batch=1, steps=4)


def test_cosine_schedule():
    assert cosine_lr(0, 1e-3, 10, 2) == 1e-3
    assert math.isclose(cosine_lr(5, 1e-3, 10, 2), 5e-4, rel_tol=1e-12)
    assert cosine_lr(10, 1e-3, 10, 2) == 1e-3  # first restart
    assert cosine_lr(30, 1e-3, 10, 2) == 1e-3  # second restart after a 20-epoch period
    assert math.isclose(cosine_lr(20, 1e-3, 10, 2), 5e-4, rel_tol=1e-12)


def test_clip_scales_to_norm():
    p = torch.nn.Parameter(torch.zeros(2))
    p.grad = torch.tensor([6.0, 8.0])
    raw = clip_global_norm([p], 1.0)
    assert raw == 10.0 and torch.allclose(p.grad, torch.tensor([0.6, 0.8]))


def test_zero_gradient_leaves_parameters():
    model = build_model(TrainConfig(**TINY))
    before = [p.detach().clone() for p in model.parameters()]
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    optimizer_step(model, opt, TrainConfig(**TINY), 1e-2)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_nonfinite_gradient_is_named():
    model = build_model(TrainConfig(**TINY))
    for p in model.parameters():
        p.grad = torch.zeros_like(p)
    model.synapses["stem_conv"].weight.grad[0, 0, 0, 0] = math.nan
    with pytest.raises(FloatingPointError, match="stem_conv"):
        optimizer_step(model, torch.optim.Adam(model.parameters()), TrainConfig(**TINY), 1e-3)


def test_unused_parameter_gets_zero_gradient():
    cfg = TrainConfig(**TINY, readout="spike")
    model = build_model(cfg)
    scenes = [gen_scene(RngStream(0, 1), BevConfig.scaled(8), 2)]
    out = model(encode_batch(cfg, batch_frames(scenes), "t"))
    bptt_backward(training_loss(out, batch_truth(scenes), cfg, 0).total, model)
    # the vmem integrators are not part of a spike-only loss
    assert torch.all(model.readouts["box"].beta_raw.grad == 0)
    with pytest.raises(RuntimeError):
        bptt_backward(torch.tensor(1.0), model)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(clip_norm=0)
    with pytest.raises(ConfigError):
        TrainConfig(steps=1)
    with pytest.raises(ConfigError):
        TrainConfig(readout="rates")
    with pytest.raises(ValueError):
        TrainConfig(encoder="morse")
    assert TrainConfig(epochs=200).e_gate == 40
    assert TrainConfig.from_dict(TrainConfig(seed=5).to_dict()) == TrainConfig(seed=5)


def test_zero_learning_rate_is_a_no_op(tmp_path):
    cfg = TrainConfig(**{**TINY, "epochs": 1}, lr=0.0)
    res = fit(cfg, tmp_path)
    fresh = build_model(cfg)
    assert all(torch.equal(a, b) for a, b in zip(fresh.parameters(), res.model.parameters()))
    scenes = [gen_scene(RngStream(0, 2), BevConfig.scaled(8), 2)]
    frames = batch_frames(scenes)
    a, b = predict(fresh, cfg, frames), predict(res.model, cfg, frames)
    gt = batch_truth(scenes)
    assert training_loss(a, gt, cfg, 0).total == training_loss(b, gt, cfg, 0).total


def test_fit_outputs_and_determinism(tmp_path):
    cfg = TrainConfig(**TINY, seed=3)
    a = fit(cfg, tmp_path / "a")
    b = fit(cfg, tmp_path / "b")
    assert a.step_log == b.step_log and len(a.step_log) == 4
    for name in ("metrics.csv", "steps.csv", "model.sgck", "firing_rate.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,kp_loss,box_loss,rot_loss,mean_firing_rate,lr"
    model, cfg2, meta = load_model(tmp_path / "a" / "model.sgck")
    assert cfg2 == cfg and meta["step"] == 4
    assert all(torch.equal(p, q) for p, q in zip(model.parameters(), a.model.parameters()))
    for lif in a.model.neurons.values():
        assert bool((lif.beta > 0).all() and (lif.beta < 1).all() and (lif.threshold > 0).all())


def test_divergence_keeps_last_good(tmp_path, monkeypatch):
    real = train_mod.readout_losses
    calls = {"n": 0}

    def poisoned(out, gt, cfg, epoch):
        calls["n"] += 1
        parts = real(out, gt, cfg, epoch)
        if calls["n"] == 2:
            parts["spike"].kp = parts["spike"].kp * math.nan
        return parts

    monkeypatch.setattr(train_mod, "readout_losses", poisoned)
    with pytest.raises(FloatingPointError, match="step 1"):
        fit(TrainConfig(**TINY), tmp_path)
    _, meta = load_checkpoint(tmp_path / "last_good.sgck")
    assert meta["step"] == 1 and "not finite" in meta["aborted"]


def test_match_count_is_one_to_one():
    class P:
        def __init__(self, r, c):
            self.row, self.col = r, c

    objs = [P(5, 5), P(5, 7)]
    assert match_count(objs, [P(5, 6)]) == 1
    assert match_count(objs, [P(5, 5), P(5, 8)]) == 2
    assert match_count(objs, [P(9, 9)]) == 0


def test_scene_generator_contract():
    cfg = BevConfig.scaled(8)
    empty = gen_scene(RngStream(0, 0), cfg, 0)
    assert empty.objects == [] and empty.truth.kp_heatmap.max() < 1
    one = gen_scene(RngStream(0, 1), cfg, 1)
    assert int((one.truth.kp_heatmap == 1).sum()) == 1
    lo = math.log10(min(b[0] for b in DIM_BOUNDS.values()))
    hi = math.log10(max(b[1] for b in DIM_BOUNDS.values()))
    assert math.isclose(lo, 0.114, abs_tol=1e-3) and math.isclose(hi, 0.716, abs_tol=1e-3)
    for seed in range(10):
        s = gen_scene(RngStream(seed, 5), cfg, 3)
        at = s.truth.kp_heatmap[0, 0] == 1
        d = s.truth.box_dims[0][:, at]
        assert bool(((d >= lo) & (d <= hi)).all())
        for o in s.objects:
            for k, (a, b) in DIM_BOUNDS.items():
                assert a <= getattr(o, k) <= b
    again = gen_scene(RngStream(4, 5), cfg, 3)
    assert np.array_equal(again.frame.combined, gen_scene(RngStream(4, 5), cfg, 3).frame.combined)
