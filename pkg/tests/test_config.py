import pytest

from spikegrid.config import RunConfig, dump, load, parse
from spikegrid.core import ConfigError


def test_defaults_and_round_trip():
    c = parse("")
    assert c == RunConfig()
    assert dump(parse(dump(c))) == dump(c)


def test_file_values_and_overrides():
    text = "[train]\nepochs = 3\nlr = 0.01\n[loss]\nlambda_d = 0.2\nbox_k = 5\n[bev]\nz_range = 5.0\n"
    c = parse(text, {"train": {"epochs": 7}})
    assert c.train.epochs == 7 and c.train.lr == 0.01
    assert c.train.kp.lambda_d == 0.2 and c.train.box_k == 5 and c.bev.z_range == 5.0
    assert c.train.e_gate == 2  # ceil(0.2 * 7)


@pytest.mark.parametrize("text", [
    "[model]\nx = 1\n",
    "[train]\nepoch = 3\n",
    "[train]\nepochs = three\n",
    "[train]\nper_channel = maybe\n",
    "[train]\nclip_norm = -1\n",
    "[bev]\ngrid = 100\n",
    "not an ini file",
])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        parse(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load(tmp_path / "nope.ini")
    (tmp_path / "ok.ini").write_text("[train]\nseed = 9\n")
    assert load(tmp_path / "ok.ini").train.seed == 9
