"""Point cloud ingestion: KITTI-style ``.bin`` parsing and BEV rasterisation.

The 11-channel frame stacks five pillar statistics (z max, occupancy,
mean intensity, z min, z std) with a 6-bin vertical occupancy map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .core import ConfigError

PRIMARY_CHANNELS = ("z_max", "occupancy", "intensity", "z_min", "z_std")


@dataclass(frozen=True)
class BevConfig:
    range_x: float = 60.0
    range_y: float = 60.0
    x_max: float = 60.0
    y_max: float = 30.0
    cell: float = 0.1875
    grid: int = 320
    z_bins: int = 6
    z_bin_top: float = 2.4
    z_shift: float = 3.0
    # height span after shifting; normalises z_max / z_min, half of it normalises z_std
    z_range: float = 4.0

    def __post_init__(self):
        for name in ("range_x", "range_y"):
            rng = getattr(self, name)
            if round(rng / self.cell) != self.grid:
                raise ConfigError(f"{name}={rng} m at cell {self.cell} m gives "
                                  f"{rng / self.cell:g} cells, grid is {self.grid}")
        if self.z_bins < 1 or self.z_bin_top <= 0 or self.z_range <= 0:
            raise ConfigError("z_bins >= 1, z_bin_top > 0 and z_range > 0 required")

    @classmethod
    def scaled(cls, scale: int, **overrides) -> "BevConfig":
        """Same metric coverage on a grid ``scale`` times coarser."""
        base = cls(**overrides)
        kw = {f.name: getattr(base, f.name) for f in fields(cls)}
        kw.update(cell=base.cell * scale, grid=base.grid // scale)
        return cls(**kw)

    @property
    def channels(self) -> int:
        return len(PRIMARY_CHANNELS) + self.z_bins


@dataclass
class PointCloud:
    """``points`` is an (N, 4) float32 array of x, y, z, intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float32).reshape(-1, 4).copy()
        if not np.isfinite(pts[:, :3]).all():
            raise ValueError("point coordinates must be finite")
        pts[:, 3] = np.clip(np.nan_to_num(pts[:, 3]), 0.0, 1.0)
        self.points = pts

    def __len__(self):
        return len(self.points)


@dataclass
class BevFrame:
    primary: np.ndarray  # (5, H, W)
    zbins: np.ndarray  # (K, H, W)

    @property
    def combined(self) -> np.ndarray:
        return np.concatenate([self.primary, self.zbins], axis=0)

    @property
    def occupancy(self) -> np.ndarray:
        return self.primary[1]


def load_pointcloud(source) -> PointCloud:
    """Parse little-endian float32 (x, y, z, i) records from bytes or a stream."""
    raw = source if isinstance(source, (bytes, bytearray, memoryview)) else source.read()
    if len(raw) % 16:
        bad = len(raw) - len(raw) % 16
        raise ValueError(f"truncated point record at byte offset {bad} "
                         f"({len(raw)} bytes is not a multiple of 16)")
    pts = np.frombuffer(bytes(raw), dtype="<f4").reshape(-1, 4)
    return PointCloud(pts)


def dump_pointcloud(pc: PointCloud) -> bytes:
    return np.ascontiguousarray(pc.points, dtype="<f4").tobytes()


def project_point(x: float, y: float, cfg: BevConfig):
    """Grid (row, col) of a point, or ``None`` when it falls off the grid."""
    r = math.floor((cfg.x_max - x) / cfg.cell)
    c = math.floor((cfg.y_max - y) / cfg.cell)
    if 0 <= r < cfg.grid and 0 <= c < cfg.grid:
        return r, c
    return None


def _project_all(pts: np.ndarray, cfg: BevConfig):
    x = pts[:, 0].astype(np.float64)
    y = pts[:, 1].astype(np.float64)
    r = np.floor((cfg.x_max - x) / cfg.cell)
    c = np.floor((cfg.y_max - y) / cfg.cell)
    keep = (r >= 0) & (r < cfg.grid) & (c >= 0) & (c < cfg.grid)
    return r[keep].astype(np.int64), c[keep].astype(np.int64), keep


def build_frame(pc: PointCloud, cfg: BevConfig) -> BevFrame:
    """Rasterise a point cloud into primary pillar features and z-bin occupancy.

    Height statistics use Welford's recurrence, applied in lockstep across
    all pillars: pass ``k`` folds the k-th point (in file order) of every
    pillar that has one.
    """
    g = cfg.grid
    primary = np.zeros((5, g, g), dtype=np.float32)
    zbins = np.zeros((cfg.z_bins, g, g), dtype=np.float32)
    if len(pc) == 0:
        return BevFrame(primary, zbins)

    rows, cols, keep = _project_all(pc.points, cfg)
    if rows.size == 0:
        return BevFrame(primary, zbins)
    z = np.clip(pc.points[keep, 2].astype(np.float64) + cfg.z_shift, 0.0, cfg.z_range)
    inten = pc.points[keep, 3].astype(np.float64)

    cell = rows * g + cols
    order = np.argsort(cell, kind="stable")
    cell, z, inten = cell[order], z[order], inten[order]
    uniq, start, counts = np.unique(cell, return_index=True, return_counts=True)
    n_p = uniq.size

    count = np.zeros(n_p)
    mean = np.zeros(n_p)
    m2 = np.zeros(n_p)
    isum = np.zeros(n_p)
    zmax = np.full(n_p, -np.inf)
    zmin = np.full(n_p, np.inf)
    for k in range(int(counts.max())):
        live = counts > k
        idx = start[live] + k
        zk = z[idx]
        count[live] += 1
        delta = zk - mean[live]
        mean[live] += delta / count[live]
        m2[live] += delta * (zk - mean[live])
        isum[live] += inten[idx]
        zmax[live] = np.maximum(zmax[live], zk)
        zmin[live] = np.minimum(zmin[live], zk)
    std = np.sqrt(m2 / count)

    pr, pc_ = uniq // g, uniq % g
    primary[0, pr, pc_] = np.clip(zmax / cfg.z_range, 0, 1)
    primary[1, pr, pc_] = 1.0
    primary[2, pr, pc_] = np.clip(isum / count, 0, 1)
    primary[3, pr, pc_] = np.clip(zmin / cfg.z_range, 0, 1)
    primary[4, pr, pc_] = np.clip(std / (cfg.z_range / 2), 0, 1)

    width = cfg.z_bin_top / cfg.z_bins
    b = np.floor(z / width).astype(np.int64)
    inb = b < cfg.z_bins
    zbins[b[inb], (cell[inb] // g), (cell[inb] % g)] = 1.0

    # empty pillars stay exactly zero
    primary *= primary[1][None]
    return BevFrame(primary, zbins)

