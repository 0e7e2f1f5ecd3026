import math

import numpy as np
import pytest

from spikegrid.bev import BevConfig
from spikegrid.core import ConfigError, RngStream
from spikegrid.decode import (DecodeConfig, assemble, decode_dims, decode_keypoints,
                              decode_rotation, write_detections)
from spikegrid.scenes import gen_scene


def test_keypoints_examples():
    assert decode_keypoints(np.zeros((20, 20))) == []
    m = np.zeros((20, 20))
    m[10, 12] = 0.8
    assert decode_keypoints(m) == [(10, 12, 0.8)]
    m[10, 13] = 0.6
    assert decode_keypoints(m) == [(10, 12, 0.8)]
    m[10, 13] = 0.8  # plateau: one survivor, raster order wins
    assert decode_keypoints(m) == [(10, 12, 0.8)]


def test_dims_inverse_encoding():
    assert decode_dims(np.zeros((3, 5, 5)), (2, 2)) == (1.0, 1.0, 1.0)
    v = np.full((3, 5, 5), math.log10(4.5))
    assert math.isclose(decode_dims(v, (2, 2))[2], 4.5, rel_tol=1e-12)
    assert decode_dims(np.ones((3, 5, 5)), (2, 2)) == (10.0, 10.0, 10.0)
    with pytest.raises(ConfigError):
        decode_dims(v, (2, 2), k=2)


def test_rotation_tie_rule():
    one_hot = np.zeros((31, 1, 1))
    one_hot[7] = 1
    assert decode_rotation(one_hot, (0, 0)) == 7
    assert decode_rotation(np.ones((31, 1, 1)), (0, 0)) == 0
    r = np.zeros((31, 1, 1))
    r[:3, 0, 0] = [0.2, 0.5, 0.5]
    assert decode_rotation(r, (0, 0)) == 1


def test_variants_share_the_decoder():
    H = 12
    kp = np.zeros((1, H, H))
    kp[0, 3, 4], kp[0, 8, 9] = 0.9, 0.6
    box, rot = np.zeros((3, H, H)), np.zeros((31, H, H))
    spike = assemble(kp, box, rot, "spike")
    logit = np.log(np.clip(kp, 1e-12, None) / np.clip(1 - kp, 1e-12, None))
    vmem = assemble(logit, box, rot, "vmem")
    assert [(d.row, d.col) for d in spike] == [(d.row, d.col) for d in vmem] == [(3, 4), (8, 9)]
    assert assemble(np.zeros((1, H, H)), box, rot, "spike") == []
    assert assemble(np.full((1, H, H), -50.0), box, rot, "vmem") == []
    with pytest.raises(ConfigError):
        assemble(kp, None, rot, "vmem")


def test_planted_scene_round_trip():
    scene = gen_scene(RngStream(11, 0), BevConfig.scaled(8), 3)
    heat = scene.truth.kp_heatmap[0, 0].numpy()
    dets = assemble(heat, scene.truth.box_dims[0].numpy(), np.zeros((31,) + heat.shape),
                    "spike", DecodeConfig(threshold=0.99))
    assert len(dets) == len(scene.objects) == 3
    for o in scene.objects:
        assert any(abs(d.row - o.row) <= 1 and abs(d.col - o.col) <= 1 for d in dets)


def test_write_detections(tmp_path):
    kp = np.zeros((1, 5, 5))
    kp[0, 2, 2] = 0.5
    dets = assemble(kp, np.zeros((3, 5, 5)), np.zeros((31, 5, 5)))
    write_detections(tmp_path / "d.csv", [("f0", dets), ("f1", [])])
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "frame,row,col,h,w,l,rot_bin,score"
    assert lines[1] == "f0,2,2,1.000000,1.000000,1.000000,0,0.500000"
    assert len(lines) == 2
