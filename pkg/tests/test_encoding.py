import numpy as np
import pytest
import torch

from spikegrid.core import ConfigError, RngStream
from spikegrid.encoding import (encode_latency, encode_poisson, encode_self, encode_zaxis,
                                input_channels, latency_step, network_input)


def _rng():
    return RngStream(0, 9)


def test_poisson_extremes():
    assert encode_poisson(np.zeros((1, 2, 3, 3)), 13, _rng()).count() == 0
    ones = encode_poisson(np.ones((1, 2, 3, 3)), 13, _rng())
    assert ones.count() == ones.data.numel()


def test_poisson_half_rate():
    r = encode_poisson(np.full((1, 1, 100, 100), 0.5), 1, _rng()).rate().mean().item()
    assert abs(r - 0.5) <= 0.015


def test_poisson_is_reproducible():
    x = np.random.default_rng(1).random((1, 3, 6, 6))
    a = encode_poisson(x, 5, RngStream(3, 4)).data
    assert torch.equal(a, encode_poisson(x, 5, RngStream(3, 4)).data)
    assert not torch.equal(a, encode_poisson(x, 5, RngStream(3, 5)).data)


def test_input_range_checked():
    with pytest.raises(ValueError):
        encode_poisson(np.full((1, 1, 2, 2), 1.5), 3, _rng())
    with pytest.raises(ValueError):
        encode_latency(np.full((1, 1, 2, 2), -0.1), 3)


def test_latency_examples():
    assert latency_step(1.0, 13) == 0
    assert latency_step(0.0, 13) == -1
    assert latency_step(0.5, 13) == 6
    tr = encode_latency(np.array([[[[1.0, 0.0, 0.5]]]]), 13).data
    assert tr[:, 0, 0, 0, 0].nonzero().flatten().tolist() == [0]
    assert tr[:, 0, 0, 0, 1].sum() == 0
    assert tr[:, 0, 0, 0, 2].nonzero().flatten().tolist() == [6]


def test_zaxis_examples():
    assert encode_zaxis(np.zeros((1, 6, 3, 3)), 13).count() == 0
    z = np.zeros((1, 6, 3, 3))
    z[0, 3, 1, 2] = 1
    tr = encode_zaxis(z, 13).data
    assert tr.shape == (13, 1, 1, 3, 3)
    assert tr.nonzero().tolist() == [[3, 0, 0, 1, 2]]
    full = np.zeros((1, 6, 1, 1))
    full[0, :, 0, 0] = 1
    assert encode_zaxis(full, 13).data[:, 0, 0, 0, 0].nonzero().flatten().tolist() == list(range(6))
    with pytest.raises(ConfigError):
        encode_zaxis(z, 5)


def test_self_coding_repeats_frame():
    x = np.random.default_rng(2).random((2, 11, 4, 4)).astype(np.float32)
    assert torch.equal(encode_self(x, 1)[0], torch.from_numpy(x))
    seq = encode_self(x, 7)
    assert all(torch.equal(seq[i], seq[0]) for i in range(7))


def test_network_input_shapes():
    frame = np.random.default_rng(3).random((2, 11, 5, 5)).astype(np.float32)
    frame[:, 5:] = frame[:, 5:] > 0.5  # z-bin planes are binary
    for kind in ("self", "poisson", "latency", "zaxis"):
        x = network_input(kind, frame, 13, _rng())
        assert x.shape == (13, 2, input_channels(kind), 5, 5)
    with pytest.raises(ConfigError):
        network_input("poisson", frame, 13)
    with pytest.raises(ValueError):
        network_input("bogus", frame, 13)
