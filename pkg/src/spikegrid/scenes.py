"""Synthetic BEV scenes with planted vehicles, for desk-scale training and tests."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .bev import BevConfig, BevFrame, PointCloud, build_frame, project_point
from .core import RngStream
from .losses import GroundTruth

log = logging.getLogger(__name__)

DIM_BOUNDS = {"h": (1.3, 1.9), "w": (1.5, 2.1), "l": (3.4, 5.2)}
N_ROT_BINS = 31
PLACEMENT_TRIES = 100


@dataclass
class PlantedObject:
    x: float
    y: float
    h: float
    w: float
    l: float
    yaw: float  # [0, pi)
    row: int = -1
    col: int = -1

    @property
    def rot_bin(self) -> int:
        return min(N_ROT_BINS - 1, int(self.yaw / (math.pi / N_ROT_BINS)))


@dataclass
class SyntheticScene:
    frame: BevFrame
    truth: GroundTruth  # batch of one
    objects: list[PlantedObject] = field(default_factory=list)
    points: PointCloud | None = None


def _box_points(rng, obj: PlantedObject, density: float, z0: float):
    n = max(8, int(density * obj.l * obj.w))
    u = rng.uniform(-0.5, 0.5, size=(n, 2)) * [obj.l, obj.w]
    c, s = math.cos(obj.yaw), math.sin(obj.yaw)
    x = obj.x + u[:, 0] * c - u[:, 1] * s
    y = obj.y + u[:, 0] * s + u[:, 1] * c
    # roof-heavy height profile, as a LiDAR sees a car from above
    z = z0 + obj.h * np.sqrt(rng.uniform(0.05, 1.0, size=n))
    i = rng.uniform(0.1, 0.7, size=n)
    return np.stack([x, y, z, i], axis=1)


def gen_scene(rng: RngStream, cfg: BevConfig, n_objects: int = 3, ground_fill: float = 0.35,
              clutter: int = 4) -> SyntheticScene:
    """Non-overlapping rotated boxes over sparse ground returns and pole-like clutter."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    g = rng.generator
    z0 = -cfg.z_shift
    margin = 4.0
    xlo, xhi = cfg.x_max - cfg.range_x + margin, cfg.x_max - margin
    ylo, yhi = cfg.y_max - cfg.range_y + margin, cfg.y_max - margin

    objects: list[PlantedObject] = []
    for _ in range(n_objects):
        for _ in range(PLACEMENT_TRIES):
            h, w, l = (g.uniform(*DIM_BOUNDS[k]) for k in ("h", "w", "l"))
            cand = PlantedObject(g.uniform(xlo, xhi), g.uniform(ylo, yhi), h, w, l,
                                 g.uniform(0.0, math.pi))
            radius = 0.5 * math.hypot(l, w)
            if all(math.hypot(cand.x - o.x, cand.y - o.y) > radius + 0.5 * math.hypot(o.l, o.w) + 1.0
                   for o in objects):
                objects.append(cand)
                break
        else:
            log.info("placed %d of %d objects", len(objects), n_objects)
            break

    chunks = []
    n_ground = int(ground_fill * cfg.grid * cfg.grid)
    gx = g.uniform(cfg.x_max - cfg.range_x, cfg.x_max, size=n_ground)
    gy = g.uniform(cfg.y_max - cfg.range_y, cfg.y_max, size=n_ground)
    gz = z0 + g.normal(0.0, 0.03, size=n_ground)
    chunks.append(np.stack([gx, gy, gz, g.uniform(0.0, 0.3, size=n_ground)], axis=1))
    for _ in range(clutter):
        px, py = g.uniform(xlo, xhi), g.uniform(ylo, yhi)
        n = 12
        ph = g.uniform(0.4, 3.0)
        chunks.append(np.stack([px + g.normal(0, 0.1, n), py + g.normal(0, 0.1, n),
                                z0 + g.uniform(0, ph, n), g.uniform(0.2, 0.9, n)], axis=1))
    density = 30.0 / (cfg.cell ** 2) ** 0.5
    for obj in objects:
        chunks.append(_box_points(g, obj, density, z0))
    pc = PointCloud(np.concatenate(chunks).astype(np.float32))
    frame = build_frame(pc, cfg)

    H = cfg.grid
    heat = np.zeros((H, H), dtype=np.float32)
    dims = np.zeros((3, H, H), dtype=np.float32)
    rots = np.zeros((H, H), dtype=np.int64)
    rr, cc = np.mgrid[0:H, 0:H]
    kept = []
    for obj in objects:
        rc = project_point(obj.x, obj.y, cfg)
        if rc is None:
            continue
        obj.row, obj.col = rc
        kept.append(obj)
        sigma = max(1.0, min(obj.w, obj.l) / cfg.cell / 6.0)
        gauss = np.exp(-((rr - obj.row) ** 2 + (cc - obj.col) ** 2) / (2 * sigma ** 2))
        heat = np.maximum(heat, gauss.astype(np.float32))
        heat[obj.row, obj.col] = 1.0
        dims[:, obj.row, obj.col] = np.clip(np.log10([obj.h, obj.w, obj.l]), 0.0, 1.0)
        rots[obj.row, obj.col] = obj.rot_bin
    truth = GroundTruth(torch.from_numpy(heat)[None, None], torch.from_numpy(dims)[None],
                        torch.from_numpy(rots)[None])
    return SyntheticScene(frame, truth, kept, pc)


def batch_truth(scenes: list[SyntheticScene]) -> GroundTruth:
    return GroundTruth(torch.cat([s.truth.kp_heatmap for s in scenes]),
                       torch.cat([s.truth.box_dims for s in scenes]),
                       torch.cat([s.truth.rot_bins for s in scenes]))


def batch_frames(scenes: list[SyntheticScene]) -> np.ndarray:
    return np.stack([s.frame.combined for s in scenes])
