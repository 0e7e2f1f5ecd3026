"""Shared containers, RNG streams and binary formats.

Dense tensors are plain ``numpy.ndarray`` (I/O side) or ``torch.Tensor``
(engine side) in (batch, channel, row, column) order. Spike trains add a
leading time axis and are wrapped in :class:`SpikeTrain` so that
non-binary data is rejected at the boundary.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np
import torch

BEVT_MAGIC = b"BEVT"
BEVT_VERSION = 1
CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1

_AXES = ("batch", "channels", "height", "width")


class DimensionError(ValueError):
    """Raised when tensor shapes disagree."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


def concat_channels(a, b):
    """Concatenate two rank-4 tensors along the channel axis, ``a`` first.

    Works on numpy arrays and torch tensors alike.
    """
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError(f"expected rank-4 tensors, got ranks {a.ndim} and {b.ndim}")
    bad = [
        f"{_AXES[i]} ({a.shape[i]} vs {b.shape[i]})"
        for i in (0, 2, 3)
        if a.shape[i] != b.shape[i]
    ]
    if bad:
        raise DimensionError("channel concat mismatch on " + ", ".join(bad))
    if isinstance(a, torch.Tensor):
        return torch.cat([a, b], dim=1)
    return np.concatenate([a, b], axis=1)


def serialize_tensor(t, sink: BinaryIO) -> int:
    """Write a rank-4 tensor in BEVT format; returns bytes written."""
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.ndim != 4:
        raise DimensionError(f"BEVT stores rank-4 tensors, got shape {arr.shape}")
    header = BEVT_MAGIC + struct.pack("<I4I", BEVT_VERSION, *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        sink.write(header)
        sink.write(payload)
    except OSError as exc:
        raise OSError(f"failed writing BEVT tensor {arr.shape}: {exc}") from exc
    return len(header) + len(payload)


def deserialize_tensor(source: BinaryIO) -> np.ndarray:
    head = source.read(24)
    if len(head) != 24 or head[:4] != BEVT_MAGIC:
        raise ValueError("not a BEVT stream (bad magic or truncated header)")
    version, *dims = struct.unpack("<I4I", head[4:])
    if version != BEVT_VERSION:
        raise ValueError(f"unsupported BEVT version {version}")
    count = int(np.prod(dims))
    payload = source.read(4 * count)
    if len(payload) != 4 * count:
        raise ValueError(f"BEVT payload truncated: expected {4 * count} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def save_tensor(path, t) -> int:
    with open(path, "wb") as fh:
        return serialize_tensor(t, fh)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return deserialize_tensor(fh)


@dataclass(frozen=True)
class SpikeTrain:
    """Binary spikes shaped (T, batch, channels, height, width)."""

    data: torch.Tensor

    def __post_init__(self):
        d = self.data
        if not isinstance(d, torch.Tensor):
            d = torch.as_tensor(np.asarray(d, dtype=np.float32))
            object.__setattr__(self, "data", d)
        if d.ndim != 5:
            raise DimensionError(f"spike train must be rank 5 (T,B,C,H,W), got {tuple(d.shape)}")
        if not bool(((d == 0) | (d == 1)).all()):
            raise ValueError("spike train contains non-binary values")

    @property
    def steps(self) -> int:
        return self.data.shape[0]

    def rate(self) -> torch.Tensor:
        """Temporal mean firing rate, shape (B, C, H, W)."""
        return self.data.mean(dim=0)

    def count(self) -> int:
        return int(self.data.sum().item())


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Backed by Philox with the 128-bit key set to the pair, so every
    stochastic site gets an independent, order-free sequence.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, stream: int) -> "RngStream":
        return RngStream(self.seed, stream)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def stream_id(name: str) -> int:
    """Stable 64-bit id for a named stochastic site (FNV-1a)."""
    h = 0xCBF29CE484222325
    for byte in name.encode():
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 blobs as ``SGCK`` + version + JSON index + payload.

    The index lists each blob's name, shape and byte offset; names are
    written in sorted order so identical parameters give identical bytes.
    """
    index, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.array(params[name], dtype="<f4", order="C")  # keeps 0-d shapes
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "blobs": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack("<II", data[4:12])
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(data[12 : 12 + hlen])
        base = 12 + hlen
        params = {}
        for blob in header["blobs"]:
            count = int(np.prod(blob["shape"])) if blob["shape"] else 1
            start = base + blob["offset"]
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
            params[blob["name"]] = arr.astype(np.float32).reshape(tuple(blob["shape"]))
        return params, header["meta"]
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint ({exc})") from None


def tensor_bytes(t) -> bytes:
    buf = io.BytesIO()
    serialize_tensor(t, buf)
    return buf.getvalue()
