"""Quantize frames into non-empty voxels with 9-feature point decoration."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .pointcloud_io import Frame

NUM_FEATURES = 9


class EmptyFrameError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    range_min: tuple[float, float, float] = (0.0, 0.0, -2.0)
    range_max: tuple[float, float, float] = (10.24, 10.24, 4.0)
    voxel_size: tuple[float, float, float] = (0.32, 0.32, 6.0)
    max_points: int = 32

    def __post_init__(self):
        object.__setattr__(self, "range_min", tuple(float(v) for v in self.range_min))
        object.__setattr__(self, "range_max", tuple(float(v) for v in self.range_max))
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))
        if len(self.range_min) != 3 or len(self.range_max) != 3 or len(self.voxel_size) != 3:
            raise ValueError("range_min, range_max and voxel_size need 3 components")
        if any(hi <= lo for lo, hi in zip(self.range_min, self.range_max)):
            raise ValueError("range_max must exceed range_min on every axis")
        if any(v <= 0 for v in self.voxel_size):
            raise ValueError("voxel sizes must be positive")
        if self.max_points < 1:
            raise ValueError("max_points (T) must be >= 1")
        if min(self.dims) < 1:
            raise ValueError("voxel larger than range on some axis")

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple(hi - lo for lo, hi in zip(self.range_min, self.range_max))

    @property
    def dims(self) -> tuple[int, int, int]:
        # the small slack absorbs 149.76 / 0.32 = 467.99999... style rounding
        return tuple(
            int(math.floor(e / v + 1e-9)) for e, v in zip(self.extent, self.voxel_size)
        )

    @classmethod
    def waymo(cls, max_points: int = 32) -> "GridConfig":
        """Point cloud range and pillar size used for Waymo pre-training."""
        return cls((-74.88, -74.88, -2.0), (74.88, 74.88, 4.0), (0.32, 0.32, 6.0), max_points)


def voxel_center(coord, cfg: GridConfig) -> tuple[float, float, float]:
    coord = tuple(int(c) for c in coord)
    if any(c < 0 or c >= d for c, d in zip(coord, cfg.dims)):
        raise ValueError(f"voxel coord {coord} outside grid {cfg.dims}")
    return tuple(
        lo + (c + 0.5) * v for lo, c, v in zip(cfg.range_min, coord, cfg.voxel_size)
    )


@dataclass(frozen=True)
class Voxel:
    coord: tuple[int, int, int]
    points: np.ndarray  # (t, 9)

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class VoxelizedFrame:
    """Non-empty voxels of one frame, sorted by ``(k, j, i)``.

    features : (N, T, 9) decorated points, zero rows past ``counts[v]``
    coords   : (N, 3) integer ``(i, j, k)`` grid coordinates
    counts   : (N,) number of kept points per voxel
    """

    features: np.ndarray
    coords: np.ndarray
    counts: np.ndarray
    config: GridConfig
    sequence_id: str = ""
    frame_index: int = 0

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    @property
    def point_mask(self) -> np.ndarray:
        return np.arange(self.config.max_points)[None, :] < self.counts[:, None]

    def voxel(self, v: int) -> Voxel:
        return Voxel(tuple(int(c) for c in self.coords[v]), self.features[v, : self.counts[v]])

    @property
    def voxels(self) -> list[Voxel]:
        return [self.voxel(v) for v in range(len(self))]

    def centers(self) -> np.ndarray:
        lo = np.asarray(self.config.range_min)
        size = np.asarray(self.config.voxel_size)
        return lo + (self.coords + 0.5) * size

    def dumps(self) -> str:
        """Text dump for golden files: one header per voxel, then its rows."""
        out = [
            f"# voxelized frame seq={self.sequence_id} idx={self.frame_index} "
            f"N={len(self)} T={self.config.max_points}"
        ]
        for v in range(len(self)):
            i, j, k = self.coords[v]
            out.append(f"voxel {i} {j} {k} t={self.counts[v]}")
            for row in self.features[v, : self.counts[v]]:
                out.append("  " + " ".join(f"{x:.9g}" for x in row))
        return "\n".join(out) + "\n"


def point_voxel_indices(xyz: np.ndarray, cfg: GridConfig):
    """Integer voxel index per point and a mask of points inside the half-open range."""
    lo = np.asarray(cfg.range_min)
    hi = np.asarray(cfg.range_max)
    size = np.asarray(cfg.voxel_size)
    dims = np.asarray(cfg.dims)
    idx = np.floor((xyz - lo) / size).astype(np.int64)
    inside = np.all((xyz >= lo) & (xyz < hi) & (idx >= 0) & (idx < dims), axis=1)
    return idx, inside


def voxelize(frame: Frame, cfg: GridConfig) -> VoxelizedFrame:
    """Group in-range points into voxels and decorate them.

    A voxel receiving more than ``T`` points keeps the first ``T`` in frame
    order; cluster means use the kept points only.
    """
    xyz = frame.xyz
    idx, inside = point_voxel_indices(xyz, cfg)
    if not inside.any():
        raise EmptyFrameError(
            f"empty frame: no points of {frame.sequence_id!r}#{frame.frame_index} inside range"
        )
    pts = xyz[inside]
    coords, table, counts = kernels.group_points(idx[inside], cfg.dims, cfg.max_points)

    T = cfg.max_points
    valid = table >= 0
    gathered = np.where(valid[..., None], pts[np.where(valid, table, 0)], 0.0)
    mean = gathered.sum(axis=1) / counts[:, None]
    lo = np.asarray(cfg.range_min)
    size = np.asarray(cfg.voxel_size)
    centers = lo + (coords + 0.5) * size

    feats = np.zeros((coords.shape[0], T, NUM_FEATURES))
    feats[..., 0:3] = gathered
    feats[..., 3:6] = gathered - mean[:, None, :]
    feats[..., 6:9] = gathered - centers[:, None, :]
    feats[~valid] = 0.0
    return VoxelizedFrame(feats, coords, counts, cfg, frame.sequence_id, frame.frame_index)
