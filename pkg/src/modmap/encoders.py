"""Frozen, pixel-aligned feature extraction for images and depth maps.

The descriptors are hand-crafted per-patch statistics so the whole
pipeline runs without pretrained backbones; externally computed features
can be swapped in through :func:`load_features`. Encoders hold no state:
identical input always yields identical output, and feature cell (r, q)
depends only on pixels inside patch (r, q).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorio
from .geometry import CameraCalib

IMAGE = "image"
DEPTH = "depth"

# Descriptor family per patch: mean, std, min, max, 4 gradient-orientation
# bins, 8 block-mean intensities.
FAMILY_SIZE = 16


@dataclass(frozen=True)
class EncoderConfig:
    """Patch size and channel counts for the two descriptor extractors.

    `depth_offset` recenters valid depth values before the statistics so
    the descriptor is not dominated by the camera-to-object distance;
    without it, surface relief barely rotates the feature vector and
    cosine comparisons go blind to geometry. `depth_gain` then scales
    the recentered values so relief outweighs the constant
    valid-fraction channel. `resize_policy` records how
    non-native resolutions would be handled; the synthetic data is
    generated at the target resolution so "none" is the only policy
    implemented.
    """

    patch_size: int = 8
    c_image: int = 16
    c_depth: int = 12
    depth_offset: float = 0.0
    depth_gain: float = 1.0
    resize_policy: str = "none"

    def __post_init__(self):
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")
        if self.c_image < 4 or self.c_depth < 4:
            raise ValueError("channel counts must be >= 4")


@dataclass
class ViewSample:
    """One calibrated view: grayscale image in [0,1] and metric depth.

    Depth value 0 encodes an invalid measurement.
    """

    view_index: int
    image: np.ndarray
    depth: np.ndarray
    calib: CameraCalib

    def __post_init__(self):
        if self.image.shape != self.depth.shape:
            raise ValueError(
                f"image {self.image.shape} and depth {self.depth.shape} differ"
            )
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and >= 0")


@dataclass
class FeatureMap:
    """h x w x c grid of per-patch descriptors for one view and modality."""

    data: np.ndarray
    modality: str
    view_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("feature data must be h x w x c")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature data contains non-finite entries")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def c(self) -> int:
        return self.data.shape[2]

    def vectors(self) -> np.ndarray:
        """Unrolled (h*w, c) view of the grid, row-major."""
        return self.data.reshape(self.h * self.w, self.c)


def _block_offsets(n: int, groups: int) -> np.ndarray:
    sizes = [len(part) for part in np.array_split(np.arange(n), groups)]
    return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.intp)


def _patch_descriptors(values: np.ndarray, valid: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    """FAMILY_SIZE stats per non-overlapping p x p patch.

    Statistics run over valid pixels only. Returns (descriptors (h,w,16),
    valid_fraction (h,w)); fully invalid patches get an all-zero row.
    """
    big_h, big_w = values.shape
    if big_h % p or big_w % p:
        raise ValueError(f"dims {values.shape} not divisible by patch size {p}")
    h, w = big_h // p, big_w // p
    patches = values.reshape(h, p, w, p).transpose(0, 2, 1, 3).astype(np.float64)
    vmask = valid.reshape(h, p, w, p).transpose(0, 2, 1, 3)

    count = vmask.sum(axis=(-2, -1)).astype(np.float64)
    nonempty = count > 0
    safe_count = np.where(nonempty, count, 1.0)

    masked = np.where(vmask, patches, 0.0)
    mean = masked.sum(axis=(-2, -1)) / safe_count
    sq_mean = (masked * masked).sum(axis=(-2, -1)) / safe_count
    var = np.clip(sq_mean - mean * mean, 0.0, None)
    std = np.sqrt(var)
    minv = np.where(vmask, patches, np.inf).min(axis=(-2, -1))
    maxv = np.where(vmask, patches, -np.inf).max(axis=(-2, -1))
    minv = np.where(nonempty, minv, 0.0)
    maxv = np.where(nonempty, maxv, 0.0)
    mean = np.where(nonempty, mean, 0.0)
    std = np.where(nonempty, std, 0.0)

    # Gradient-orientation histogram from forward differences aligned on
    # the top-left (p-1)x(p-1) grid of each patch; a sample counts only if
    # the three pixels involved are all valid.
    gx = patches[..., : p - 1, 1:] - patches[..., : p - 1, : p - 1]
    gy = patches[..., 1:, : p - 1] - patches[..., : p - 1, : p - 1]
    gvalid = (
        vmask[..., : p - 1, : p - 1]
        & vmask[..., : p - 1, 1:]
        & vmask[..., 1:, : p - 1]
    )
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    bin_idx = np.clip(((ang + np.pi) / (np.pi / 2.0)).astype(np.int64), 0, 3)
    # Histogram entries are mean magnitude in per-patch units (value
    # change across one patch width), keeping slopes commensurate with
    # the value-statistics channels instead of vanishing at 1/p scale.
    hist = np.zeros((h, w, 4), dtype=np.float64)
    for k in range(4):
        sel = gvalid & (bin_idx == k)
        hist[..., k] = np.where(sel, mag, 0.0).sum(axis=(-2, -1)) / (p * p) * p

    # 2 x 4 grid of block-mean intensities over valid pixels.
    row_off = _block_offsets(p, 2)
    col_off = _block_offsets(p, 4)
    blk_sum = np.add.reduceat(np.add.reduceat(masked, row_off, axis=2), col_off, axis=3)
    blk_cnt = np.add.reduceat(
        np.add.reduceat(vmask.astype(np.float64), row_off, axis=2), col_off, axis=3
    )
    blk_mean = np.where(blk_cnt > 0, blk_sum / np.where(blk_cnt > 0, blk_cnt, 1.0), 0.0)
    blocks = blk_mean.reshape(h, w, 8)

    desc = np.concatenate(
        [mean[..., None], std[..., None], minv[..., None], maxv[..., None], hist, blocks],
        axis=-1,
    )
    valid_fraction = count / (p * p)
    return desc, valid_fraction


def _fit_channels(desc: np.ndarray, c: int) -> np.ndarray:
    if c <= desc.shape[-1]:
        return desc[..., :c]
    pad = np.zeros(desc.shape[:-1] + (c - desc.shape[-1],), dtype=desc.dtype)
    return np.concatenate([desc, pad], axis=-1)


def encode_image(image: np.ndarray, config: EncoderConfig, view_index: int = 0) -> FeatureMap:
    """Per-patch descriptors of a grayscale image, c_image channels."""
    image = np.asarray(image, dtype=np.float64)
    valid = np.ones_like(image, dtype=bool)
    desc, _ = _patch_descriptors(image, valid, config.patch_size)
    data = _fit_channels(desc, config.c_image).astype(np.float32)
    return FeatureMap(data=data, modality=IMAGE, view_index=view_index)


def encode_depth(depth: np.ndarray, config: EncoderConfig, view_index: int = 0) -> FeatureMap:
    """Per-patch descriptors of a depth map, c_depth channels.

    Pixels with depth 0 are invalid and excluded from every statistic;
    the last channel is the patch's valid-pixel fraction. Valid values
    are shifted by -depth_offset before the statistics run.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    shifted = np.where(valid, (depth - config.depth_offset) * config.depth_gain, 0.0)
    desc, valid_fraction = _patch_descriptors(shifted, valid, config.patch_size)
    data = _fit_channels(desc, config.c_depth - 1)
    data = np.concatenate([data, valid_fraction[..., None]], axis=-1).astype(np.float32)
    return FeatureMap(data=data, modality=DEPTH, view_index=view_index)


def patch_valid_fraction(depth: np.ndarray, patch_size: int) -> np.ndarray:
    """Fraction of valid (depth > 0) pixels per patch, shape (h, w)."""
    big_h, big_w = depth.shape
    if big_h % patch_size or big_w % patch_size:
        raise ValueError(f"dims {depth.shape} not divisible by {patch_size}")
    h, w = big_h // patch_size, big_w // patch_size
    valid = (depth > 0).reshape(h, patch_size, w, patch_size)
    return valid.mean(axis=(1, 3))


FOREGROUND_FRACTION = 0.5


@dataclass
class InstanceFeatures:
    """Per-view image and depth feature vectors for one object instance.

    `foreground[t]` marks positions of view t whose depth patch clears
    the background valid-fraction threshold; training only counts
    positions that inference would score, so no capacity is spent on
    cells whose scores are zeroed as background anyway.
    """

    image: list[np.ndarray]
    depth: list[np.ndarray]
    fg: list[np.ndarray]
    h: int
    w: int

    @property
    def n_views(self) -> int:
        return len(self.image)

    def image_vectors(self, view: int) -> np.ndarray:
        return self.image[view]

    def depth_vectors(self, view: int) -> np.ndarray:
        return self.depth[view]

    def foreground(self, view: int) -> np.ndarray:
        return self.fg[view]

    @classmethod
    def from_views(cls, views: list[ViewSample], config: EncoderConfig) -> "InstanceFeatures":
        image, depth, fg = [], [], []
        h = w = 0
        for k, view in enumerate(views):
            fi = encode_image(view.image, config, view_index=k)
            fd = encode_depth(view.depth, config, view_index=k)
            h, w = fi.h, fi.w
            image.append(fi.vectors())
            depth.append(fd.vectors())
            fg.append(patch_valid_fraction(view.depth, config.patch_size).reshape(-1) >= FOREGROUND_FRACTION)
        return cls(image=image, depth=depth, fg=fg, h=h, w=w)

    @classmethod
    def from_arrays(
        cls,
        image: list[np.ndarray],
        depth: list[np.ndarray],
        grid_shape: tuple[int, int],
        fg: list[np.ndarray] | None = None,
    ) -> "InstanceFeatures":
        h, w = grid_shape
        if fg is None:
            fg = [np.ones(h * w, dtype=bool) for _ in image]
        return cls(image=list(image), depth=list(depth), fg=list(fg), h=h, w=w)


def save_features(path: Path | str, fmap: FeatureMap) -> None:
    tensorio.write_tensor(path, fmap.data)


def load_features(
    path: Path | str,
    expected_shape: tuple[int, int, int],
    modality: str,
    view_index: int = 0,
) -> FeatureMap:
    """Load a feature tensor and validate shape and finiteness."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"feature file not found: {path}")
    data = tensorio.read_tensor(path)
    if data.shape != tuple(expected_shape):
        raise ValueError(
            f"feature shape mismatch: file has {data.shape}, expected {tuple(expected_shape)}"
        )
    bad = ~np.isfinite(data)
    if bad.any():
        first = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite feature entry at index {first}")
    return FeatureMap(data=data.astype(np.float32), modality=modality, view_index=view_index)
