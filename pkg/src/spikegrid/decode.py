"""Head outputs to detections, for the membrane (vmem) and rate (spike) readouts."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ConfigError

N_ROT_BINS = 31


@dataclass
class Detection:
    row: int
    col: int
    h: float
    w: float
    l: float
    rot_bin: int
    score: float

    @property
    def center(self) -> tuple[int, int]:
        return self.row, self.col


@dataclass
class DecodeConfig:
    threshold: float = 0.3
    nms_window: int = 3
    pool_k: int = 3


def decode_keypoints(kp, threshold: float = 0.3, window: int = 3):
    """Window-maximum peaks above ``threshold`` as (row, col, score), best first.

    A pixel survives if it equals the max of its window; equal neighbours
    on a plateau are thinned greedily in score-then-raster order.
    """
    m = np.asarray(kp, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"keypoint map must be 2-D, got shape {m.shape}")
    r = window // 2
    padded = np.pad(m, r, mode="constant", constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(padded, (window, window))
    local_max = win.max(axis=(-2, -1))
    rows, cols = np.nonzero((m >= local_max) & (m > threshold))
    cand = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (-m[rc], rc))
    taken = np.zeros(m.shape, dtype=bool)
    out = []
    for i, j in cand:
        if taken[i, j]:
            continue
        out.append((i, j, float(m[i, j])))
        taken[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1] = True
    return out


def pooled_at(maps, center, k: int) -> np.ndarray:
    """k x k zero-padded mean of every channel of (C, H, W) around ``center``."""
    if k % 2 == 0:
        raise ConfigError("pooling window k must be odd")
    m = np.asarray(maps, dtype=np.float64)
    r = k // 2
    padded = np.pad(m, ((0, 0), (r, r), (r, r)))
    i, j = center
    return padded[:, i : i + k, j : j + k].sum(axis=(1, 2)) / (k * k)


def decode_dims(box_maps, center, k: int = 3) -> tuple[float, float, float]:
    """(h, w, l) in metres: ``10 ** v`` with ``v`` the pooled value clipped to [0, 1]."""
    v = np.clip(pooled_at(box_maps, center, k), 0.0, 1.0)
    h, w, l = (10.0 ** v).tolist()
    return h, w, l


def decode_rotation(rot_maps, center) -> int:
    """Arg-max bin at ``center``; ties go to the lowest index."""
    i, j = center
    return int(np.argmax(np.asarray(rot_maps)[:, i, j]))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def assemble(kp, box, rot, variant: str = "spike", cfg: DecodeConfig | None = None):
    """Detections for one frame.

    ``spike``: all three maps are mean firing rates. ``vmem``: maps are
    final membrane readouts; the keypoint map goes through a logistic.
    """
    cfg = cfg or DecodeConfig()
    if variant not in ("spike", "vmem"):
        raise ConfigError(f"unknown readout variant {variant!r}")
    if kp is None or box is None or rot is None:
        raise ConfigError(f"{variant} readout requested but head maps are missing")
    kp = np.asarray(kp, dtype=np.float64)
    kp = kp[0] if kp.ndim == 3 else kp
    score_map = _sigmoid(kp) if variant == "vmem" else kp
    dets = []
    for i, j, score in decode_keypoints(score_map, cfg.threshold, cfg.nms_window):
        h, w, l = decode_dims(box, (i, j), cfg.pool_k)
        dets.append(Detection(i, j, h, w, l, decode_rotation(rot, (i, j)), score))
    return dets


def write_detections(path, frames) -> None:
    """``frames`` is an iterable of (frame_id, [Detection, ...])."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "row", "col", "h", "w", "l", "rot_bin", "score"])
        for fid, dets in frames:
            for d in dets:
                wr.writerow([fid, d.row, d.col, f"{d.h:.6f}", f"{d.w:.6f}", f"{d.l:.6f}",
                             d.rot_bin, f"{d.score:.6f}"])
