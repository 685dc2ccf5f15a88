"""Jigsaw and reconstruction targets plus mask-token substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mask_sampler import MaskPlan
from .voxel_grid import GridConfig, Voxel, VoxelizedFrame

# value written where a mask token will be injected at forward time
PLACEHOLDER = 0.0


@dataclass(frozen=True)
class WindowConfig:
    nx: int = 12
    ny: int = 12
    nz: int = 1

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("window sizes must be positive")
        if self.num_classes < 2:
            raise ValueError("a window must contain at least 2 voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def num_classes(self) -> int:
        return self.nx * self.ny * self.nz


def window_relative_index(coord, w: WindowConfig):
    """Index of a voxel inside its window: ``Ix + Iy*Nx + Iz*Nx*Ny``.

    ``coord`` may be a single ``(i, j, k)`` or an ``(M, 3)`` array.
    """
    c = np.asarray(coord, dtype=np.int64)
    ix, iy, iz = c[..., 0] % w.nx, c[..., 1] % w.ny, c[..., 2] % w.nz
    out = ix + iy * w.nx + iz * w.nx * w.ny
    return int(out) if out.ndim == 0 else out


def window_id(coords, w: WindowConfig) -> np.ndarray:
    """Integer tuple id of the window each voxel falls in, as an ``(M, 3)`` array."""
    return np.asarray(coords, dtype=np.int64) // np.asarray(w.shape)


def select_retained_point(voxel) -> int:
    """Point closest to the voxel's cluster mean; lowest index on ties."""
    pts = voxel.points if isinstance(voxel, Voxel) else np.asarray(voxel)
    if pts.shape[0] < 1:
        raise ValueError("voxel has no points")
    norms = np.linalg.norm(pts[:, 3:6], axis=1)
    return int(np.argmin(norms))


def build_shape_target(voxel, cfg: GridConfig) -> np.ndarray:
    """Voxel-center offsets scaled by the half voxel size, clamped to ``[-1, 1]``."""
    pts = voxel.points if isinstance(voxel, Voxel) else np.asarray(voxel)
    half = np.asarray(cfg.voxel_size) / 2.0
    return np.clip(pts[:, 6:9] / half, -1.0, 1.0)


def denormalize_shape(target: np.ndarray, cfg: GridConfig) -> np.ndarray:
    return np.asarray(target) * (np.asarray(cfg.voxel_size) / 2.0)


@dataclass(frozen=True, eq=False)
class MaskedBatch:
    """Network-ready tensors for one frame.

    ``features`` holds placeholders where ``vtoken_mask`` (columns 0-2) or
    ``ptoken_mask`` (all columns) is set; the model swaps in its learnable
    tokens there. Shape targets are padded to ``T`` with ``shape_target_mask``.
    """

    features: np.ndarray  # (N, T, 9)
    point_mask: np.ndarray  # (N, T) real rows, including token rows
    vtoken_mask: np.ndarray  # (N, T)
    ptoken_mask: np.ndarray  # (N, T)
    coords: np.ndarray  # (N, 3)
    kept: np.ndarray
    jigsaw: np.ndarray
    shape: np.ndarray
    jigsaw_labels: np.ndarray  # (R_p,)
    shape_targets: np.ndarray  # (R_s, T, 3)
    shape_target_mask: np.ndarray  # (R_s, T)
    window: WindowConfig
    grid: GridConfig
    sequence_id: str = ""
    frame_index: int = 0

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]

    def shape_target_list(self) -> list[np.ndarray]:
        return [t[m] for t, m in zip(self.shape_targets, self.shape_target_mask)]


def normalize_absolute(xyz: np.ndarray, cfg: GridConfig) -> np.ndarray:
    lo = np.asarray(cfg.range_min)
    return (xyz - lo) / np.asarray(cfg.extent)


def assemble_masked_batch(vf: VoxelizedFrame, plan: MaskPlan, w: WindowConfig) -> MaskedBatch:
    n = len(vf)
    if plan.num_voxels != n:
        raise ValueError(f"mask plan covers {plan.num_voxels} voxels but frame has {n}")
    cfg = vf.config
    T = cfg.max_points
    mask = vf.point_mask
    feats = vf.features.copy()
    feats[..., 0:3] = np.where(mask[..., None], normalize_absolute(feats[..., 0:3], cfg), 0.0)
    vtok = np.zeros((n, T), dtype=bool)
    ptok = np.zeros((n, T), dtype=bool)

    jig = plan.jigsaw_masked
    vtok[jig] = mask[jig]
    feats[jig, :, 0:3] = np.where(vtok[jig][..., None], PLACEHOLDER, 0.0)

    shape_idx = plan.shape_masked
    targets = np.zeros((len(shape_idx), T, 3))
    tmask = np.zeros((len(shape_idx), T), dtype=bool)
    for s, v in enumerate(shape_idx):
        voxel = vf.voxel(v)
        t = voxel.num_points
        targets[s, :t] = build_shape_target(voxel, cfg)
        tmask[s, :t] = True
        r = select_retained_point(voxel)
        row = feats[v, r].copy()
        feats[v] = 0.0
        feats[v, 0] = row
        feats[v, 1:t] = PLACEHOLDER
        ptok[v, 1:t] = True

    return MaskedBatch(
        features=feats,
        point_mask=mask.copy(),
        vtoken_mask=vtok,
        ptoken_mask=ptok,
        coords=vf.coords.copy(),
        kept=plan.kept.copy(),
        jigsaw=jig.copy(),
        shape=shape_idx.copy(),
        jigsaw_labels=window_relative_index(vf.coords[jig].reshape(-1, 3), w).astype(np.int64),
        shape_targets=targets,
        shape_target_mask=tmask,
        window=w,
        grid=cfg,
        sequence_id=vf.sequence_id,
        frame_index=vf.frame_index,
    )
