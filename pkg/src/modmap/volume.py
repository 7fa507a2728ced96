"""Voxel back end: scatter per-view anomaly maps into a shared grid.

Per-view maps are fused across modalities, bilinearly upsampled to pixel
resolution, unprojected through the calibrated cameras, and written into
an axis-aligned voxel grid with a running per-voxel maximum, so a defect
seen from a single viewpoint keeps its full score. The instance-level
score is the maximum over observed voxels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraCalib, unproject

log = logging.getLogger(__name__)

FUSE_FUNCTIONS = ("max", "min", "product", "mean")


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel grid placement: origin corner, cube size, dims."""

    origin: tuple[float, float, float]
    voxel_size: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if any(d <= 0 for d in self.dims):
            raise ValueError("grid dims must be positive")

    def world_to_voxel(self, points: np.ndarray):
        """Integer voxel indices and an inside-grid mask for (n, 3) points."""
        rel = (np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.voxel_size
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def voxel_centers(self) -> np.ndarray:
        """(X, Y, Z, 3) world coordinates of voxel centers."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def to_dict(self) -> dict:
        return {
            "origin": [float(v) for v in self.origin],
            "voxel_size": float(self.voxel_size),
            "dims": [int(d) for d in self.dims],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            origin=tuple(float(v) for v in d["origin"]),
            voxel_size=float(d["voxel_size"]),
            dims=tuple(int(v) for v in d["dims"]),
        )


@dataclass
class VoxelGrid:
    """Scored volume plus per-voxel observation counts."""

    spec: GridSpec
    scores: np.ndarray
    hit_counts: np.ndarray
    dropped_points: int = 0

    @classmethod
    def empty(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(
            spec=spec,
            scores=np.zeros(spec.dims, dtype=np.float32),
            hit_counts=np.zeros(spec.dims, dtype=np.int64),
        )


def fit_grid_spec(points: np.ndarray, pad_fraction: float = 0.05, max_dim: int = 48) -> GridSpec:
    """Axis-aligned grid over a point set, padded and capped at max_dim."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = hi - lo
    pad = span * pad_fraction + 1e-9
    lo -= pad
    hi += pad
    span = hi - lo
    voxel = float(span.max() / max_dim)
    dims = tuple(int(np.ceil(s / voxel)) for s in span)
    return GridSpec(origin=tuple(lo.tolist()), voxel_size=voxel, dims=dims)


def fuse_modalities(map_image: np.ndarray, map_depth: np.ndarray, fuse: str = "max") -> np.ndarray:
    """Element-wise combination of the two per-view modality maps."""
    if map_image.shape != map_depth.shape:
        raise ValueError(f"shape mismatch: {map_image.shape} vs {map_depth.shape}")
    if fuse == "max":
        return np.maximum(map_image, map_depth)
    if fuse == "min":
        return np.minimum(map_image, map_depth)
    if fuse == "product":
        return map_image * map_depth
    if fuse == "mean":
        return 0.5 * (map_image + map_depth)
    raise ValueError(f"unknown fuse function {fuse!r}; choose from {FUSE_FUNCTIONS}")


def bilinear_upsample(grid: np.ndarray, patch_size: int, out_shape: tuple[int, int]) -> np.ndarray:
    """Upsample an (h, w) cell grid to pixel resolution.

    Cell values sit at patch centers; edge values extend beyond the
    outermost centers.
    """
    h, w = grid.shape
    big_h, big_w = out_shape
    half = (patch_size - 1) / 2.0

    def axis_coords(n_out, n_cells):
        f = (np.arange(n_out) - half) / patch_size
        f = np.clip(f, 0.0, n_cells - 1.0)
        lo = np.floor(f).astype(np.int64)
        lo = np.minimum(lo, n_cells - 1 if n_cells == 1 else n_cells - 2)
        frac = f - lo
        return lo, frac

    r0, rf = axis_coords(big_h, h)
    c0, cf = axis_coords(big_w, w)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    rf = rf[:, None]
    cf = cf[None, :]
    top = grid[np.ix_(r0, c0)] * (1 - cf) + grid[np.ix_(r0, c1)] * cf
    bot = grid[np.ix_(r1, c0)] * (1 - cf) + grid[np.ix_(r1, c1)] * cf
    return (top * (1 - rf) + bot * rf).astype(grid.dtype)


def aggregate(
    fused_maps: list[np.ndarray],
    depths: list[np.ndarray],
    calibs: list[CameraCalib],
    spec: GridSpec,
    patch_size: int,
    upsample: str = "bilinear",
) -> VoxelGrid:
    """Scatter per-view fused maps into a voxel grid via running max.

    Every valid-depth pixel contributes its (upsampled) score to the
    voxel containing its unprojected world point. Points outside the
    grid are dropped and counted; more than 1% dropped logs a warning.
    """
    if upsample != "bilinear":
        raise ValueError(f"unknown upsample policy {upsample!r}")
    if not (len(fused_maps) == len(depths) == len(calibs)):
        raise ValueError("fused_maps, depths, calibs must have equal length")
    grid = VoxelGrid.empty(spec)
    scores_flat = grid.scores.reshape(-1)
    hits_flat = grid.hit_counts.reshape(-1)
    strides = np.array(
        [spec.dims[1] * spec.dims[2], spec.dims[2], 1], dtype=np.int64
    )
    total = 0
    dropped = 0
    for fmap, depth, calib in zip(fused_maps, depths, calibs):
        big_h, big_w = depth.shape
        pixel_scores = bilinear_upsample(fmap, patch_size, (big_h, big_w))
        vmask = depth > 0
        if not vmask.any():
            continue
        vs, us = np.nonzero(vmask)
        pts = unproject(us, vs, depth[vs, us], calib)
        idx, inside = spec.world_to_voxel(pts)
        total += idx.shape[0]
        dropped += int((~inside).sum())
        if not inside.any():
            continue
        flat = idx[inside] @ strides
        vals = pixel_scores[vs[inside], us[inside]].astype(np.float32)
        np.maximum.at(scores_flat, flat, vals)
        np.add.at(hits_flat, flat, 1)
    grid.dropped_points = dropped
    if total and dropped / total > 0.01:
        log.warning("aggregate dropped %d/%d points outside the grid", dropped, total)
    return grid


def instance_score(grid: VoxelGrid) -> float:
    """Maximum score over observed voxels; 0 when nothing was observed."""
    observed = grid.hit_counts > 0
    if not observed.any():
        return 0.0
    return float(grid.scores[observed].max())
