"""Bird's-eye-view pillar pseudo-images and trust-region masks.

Pillar features here are fixed per-pillar statistics rather than a learned
pillar network.  Every occupied pillar gets a strictly positive occupancy
channel and every empty pillar is exactly zero, which is all the
trust-region mask and the pillar alignment loss rely on.

Channel layout (channels past index 7 stay zero; ``C < 8`` truncates):

====  =====================================================
0     ``log(1 + count)``
1-3   mean offset of the points from the pillar centre (x, y) and from z = 0
4     mean intensity
5     max z
6     min z
7     range of the pillar centre divided by the farthest grid corner range
====  =====================================================
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GridMismatch, InvalidGrid, ShapeMismatch
from .pointcloud import PointCloud

N_STAT_CHANNELS = 8


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (-140.0, 140.0)
    y_range: tuple[float, float] = (-40.0, 40.0)
    resolution: float = 0.8
    channels: int = 8

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_range", tuple(float(v) for v in self.x_range))
        object.__setattr__(self, "y_range", tuple(float(v) for v in self.y_range))
        if len(self.x_range) != 2 or len(self.y_range) != 2:
            raise InvalidGrid("ranges need (min, max)")
        if not self.x_range[1] > self.x_range[0] or not self.y_range[1] > self.y_range[0]:
            raise InvalidGrid(f"empty grid extent: x={self.x_range}, y={self.y_range}")
        if not self.resolution > 0:
            raise InvalidGrid(f"resolution must be > 0, got {self.resolution}")
        if int(self.channels) != self.channels or self.channels < 1:
            raise InvalidGrid(f"channels must be a positive integer, got {self.channels}")
        object.__setattr__(self, "channels", int(self.channels))

    @property
    def H(self) -> int:
        return _cells(self.y_range, self.resolution)

    @property
    def W(self) -> int:
        return _cells(self.x_range, self.resolution)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.H, self.W)

    @property
    def max_range(self) -> float:
        return max(math.hypot(x, y) for x in self.x_range for y in self.y_range)

    @classmethod
    def from_dict(cls, doc: dict) -> "GridSpec":
        return cls(**doc)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "resolution": self.resolution,
            "channels": self.channels,
        }


def _cells(rng: tuple[float, float], res: float) -> int:
    # guard against 80 / 0.8 landing a hair above an integer
    n = (rng[1] - rng[0]) / res
    return max(1, math.ceil(n - 1e-9))


@dataclass(frozen=True, eq=False)
class PillarImage:
    grid: GridSpec
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float64)
        if data.shape != self.grid.shape:
            raise ShapeMismatch(f"image shape {data.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(data).all():
            raise ValueError("pillar image entries must be finite")
        object.__setattr__(self, "data", data)

    def occupancy(self) -> np.ndarray:
        """H x W boolean map of cells with any nonzero channel."""
        return (self.data != 0).any(axis=0)


@dataclass(frozen=True, eq=False)
class TrustMask:
    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeMismatch("trust mask must be H x W")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("trust mask entries must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.float64))


def pillar_indices(xyz: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/column of each point's pillar and the mask of points inside the grid."""
    x0, x1 = grid.x_range
    y0, y1 = grid.y_range
    x, y = xyz[:, 0], xyz[:, 1]
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    col = np.floor((x[inside] - x0) / grid.resolution).astype(np.int64)
    row = np.floor((y[inside] - y0) / grid.resolution).astype(np.int64)
    np.clip(col, 0, grid.W - 1, out=col)
    np.clip(row, 0, grid.H - 1, out=row)
    return row, col, inside


def pillarize(pc: PointCloud, grid: GridSpec) -> PillarImage:
    """Scatter a cloud into a dense ``C x H x W`` pseudo-image.

    Points outside the grid's x/y extent are ignored.
    """
    C, H, W = grid.shape
    stats = np.zeros((N_STAT_CHANNELS, H, W))
    row, col, inside = pillar_indices(pc.xyz, grid)
    if row.size:
        pts = pc.points[inside]
        flat = row * W + col
        count = np.bincount(flat, minlength=H * W).astype(np.float64)
        occ = count > 0
        cx = grid.x_range[0] + (col + 0.5) * grid.resolution
        cy = grid.y_range[0] + (row + 0.5) * grid.resolution

        def mean_of(values):
            s = np.bincount(flat, weights=values, minlength=H * W)
            out = np.zeros(H * W)
            out[occ] = s[occ] / count[occ]
            return out

        zmax = np.full(H * W, -np.inf)
        zmin = np.full(H * W, np.inf)
        np.maximum.at(zmax, flat, pts[:, 2])
        np.minimum.at(zmin, flat, pts[:, 2])
        zmax[~occ] = 0.0
        zmin[~occ] = 0.0

        centers_x = grid.x_range[0] + (np.arange(W) + 0.5) * grid.resolution
        centers_y = grid.y_range[0] + (np.arange(H) + 0.5) * grid.resolution
        center_range = np.hypot(centers_x[None, :], centers_y[:, None]).ravel() / grid.max_range

        stats[0] = np.log1p(count).reshape(H, W)
        stats[1] = mean_of(pts[:, 0] - cx).reshape(H, W)
        stats[2] = mean_of(pts[:, 1] - cy).reshape(H, W)
        stats[3] = mean_of(pts[:, 2]).reshape(H, W)
        stats[4] = mean_of(pts[:, 3]).reshape(H, W)
        stats[5] = zmax.reshape(H, W)
        stats[6] = zmin.reshape(H, W)
        stats[7] = np.where(occ, center_range, 0.0).reshape(H, W)

    data = np.zeros((C, H, W))
    k = min(C, N_STAT_CHANNELS)
    data[:k] = stats[:k]
    return PillarImage(grid, data)


def trust_region(I_s: PillarImage, I_r: PillarImage) -> TrustMask:
    """Cells occupied (any nonzero channel) in both images."""
    if I_s.grid != I_r.grid:
        raise GridMismatch(f"grids differ: {I_s.grid} vs {I_r.grid}")
    return TrustMask(I_s.occupancy() & I_r.occupancy())


def write_pim(image: PillarImage | np.ndarray, path: str | os.PathLike) -> None:
    """Dump a pseudo-image: ``C, H, W`` as little-endian int32, then row-major float32."""
    data = image.data if isinstance(image, PillarImage) else np.asarray(image)
    if data.ndim != 3:
        raise ShapeMismatch("pseudo-image must be C x H x W")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", *data.shape))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_pim(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ShapeMismatch(f"{path}: truncated pseudo-image header")
    c, h, w = struct.unpack("<3i", raw[:12])
    body = np.frombuffer(raw, dtype="<f4", offset=12)
    if body.size != c * h * w:
        raise ShapeMismatch(f"{path}: expected {c * h * w} values, found {body.size}")
    return body.reshape(c, h, w).astype(np.float64)
