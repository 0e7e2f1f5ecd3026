"""INI configuration with ``[bev]``, ``[loss]`` and ``[train]`` sections."""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields

from .bev import BevConfig
from .core import ConfigError
from .losses import KpLossConfig
from .train import TrainConfig

LOSS_TRAIN_KEYS = ("box_k", "smoothing", "e_gate")
SECTIONS = ("bev", "loss", "train")


@dataclass
class RunConfig:
    bev: BevConfig = field(default_factory=BevConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _coerce(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else str(v)


def dump(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    cp["bev"] = {f.name: _fmt(getattr(cfg.bev, f.name)) for f in fields(BevConfig)}
    t = cfg.train
    loss = {f.name: _fmt(getattr(t.kp, f.name)) for f in fields(KpLossConfig) if f.name != "e_gate"}
    loss.update({k: _fmt(getattr(t, k)) for k in LOSS_TRAIN_KEYS})
    cp["loss"] = loss
    cp["train"] = {f.name: _fmt(getattr(t, f.name)) for f in fields(TrainConfig)
                   if f.name not in LOSS_TRAIN_KEYS and f.name != "kp"}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def parse(text: str = "", overrides: dict[str, dict] | None = None) -> RunConfig:
    """Build a validated config from INI text; ``overrides[section][key]`` wins over the file."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    values = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    for sec, kv in (overrides or {}).items():
        values[sec].update({k: str(v) for k, v in kv.items() if v is not None})

    bev_kw = _typed(values["bev"], {f.name: getattr(BevConfig(), f.name)
                                    for f in fields(BevConfig)}, "bev")
    kp_defaults = {f.name: getattr(KpLossConfig(), f.name) for f in fields(KpLossConfig)
                   if f.name != "e_gate"}
    loss_defaults = {**kp_defaults, "box_k": 3, "smoothing": 0.1, "e_gate": 0}
    loss_kw = _typed(values["loss"], loss_defaults, "loss")
    base = TrainConfig()
    train_defaults = {f.name: getattr(base, f.name) for f in fields(TrainConfig)
                      if f.name not in LOSS_TRAIN_KEYS and f.name != "kp"}
    train_kw = _typed(values["train"], train_defaults, "train")

    kp = KpLossConfig(**{k: v for k, v in loss_kw.items() if k in kp_defaults})
    extra = {k: loss_kw[k] for k in LOSS_TRAIN_KEYS if k in loss_kw}
    return RunConfig(BevConfig(**bev_kw), TrainConfig(kp=kp, **train_kw, **extra))


def _typed(raw: dict, defaults: dict, section: str) -> dict:
    unknown = [k for k in raw if k not in defaults]
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(unknown))}")
    return {k: _coerce(v, defaults[k], f"[{section}] {k}") for k, v in raw.items()}


def load(path=None, overrides=None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse(text, overrides)
