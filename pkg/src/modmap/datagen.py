"""Deterministic synthetic multiview benchmark with injectable defects.

Scenes are analytic primitives (sphere, box, superellipsoid) ray-cast
from a ring of calibrated cameras, textured with seeded band-limited
noise plus albedo bands and Lambert shading. Defects perturb geometry
and/or appearance and come with voxel ground truth; artefacts corrupt a
single view's image or depth and are never ground truth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .encoders import ViewSample
from .geometry import CameraCalib, look_at, make_intrinsics, unproject
from .volume import GridSpec, fit_grid_spec

# Mostly top-down light: limb shading then follows local slope, which
# depth descriptors encode, keeping image content predictable from depth.
LIGHT_DIR = np.array([0.2, -0.15, 0.95])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)

GEOMETRIC_BUMP = "geometric_bump"
GEOMETRIC_DENT = "geometric_dent"
INTENSITY_BLOB = "intensity_blob"
SPECULAR_HIGHLIGHT = "specular_highlight"
DEPTH_HOLE = "depth_hole"

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class SceneSpec:
    """Object primitive, texture seed and camera ring for one category.

    yaw/tilt rotate the object so no camera sits on one of its symmetry
    planes; a symmetric pose would make depth maps coincide across views
    and leave the crossmodal mapping one-to-many.
    """

    primitive: str = "sphere"
    size: tuple[float, ...] = (1.0,)
    n_views: int = 8
    resolution: int = 128
    ring_radius: float = 3.0
    elevation: float = 0.5
    focal: float = 150.0
    ambient: float = 0.45
    # Backdrop gray level; keeps silhouette patches well conditioned
    # (a black backdrop makes their descriptors swing with tiny changes).
    background_intensity: float = 0.3
    yaw: float = 0.0
    tilt: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("n_views must be >= 2")
        sizes = {"sphere": 1, "ellipsoid": 3, "box": 3, "superellipsoid": 5}
        if self.primitive not in sizes:
            raise ValueError(f"unknown primitive {self.primitive!r}")
        if len(self.size) != sizes[self.primitive]:
            raise ValueError(
                f"{self.primitive} needs {sizes[self.primitive]} size params, got {len(self.size)}"
            )
        if any(v <= 0 for v in self.size):
            raise ValueError("size params must be positive")

    def patch_world_size(self, patch_size: int = 8) -> float:
        """World-space footprint of one feature patch at object distance."""
        focal = self.focal * self.resolution / 128.0
        return patch_size * (self.ring_radius - 0.6) / focal

    def rotation(self) -> np.ndarray:
        """Object-to-world rotation from yaw (about z) then tilt (about x)."""
        cz, sz = math.cos(self.yaw), math.sin(self.yaw)
        cx, sx = math.cos(self.tilt), math.sin(self.tilt)
        rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
        return rz @ rx


@dataclass(frozen=True)
class DefectSpec:
    """A surface defect; `visible_views` restricts which views show it.

    modality_visibility limits the modification to one modality:
    image_only skips the depth change, depth_only skips the image
    change. Intensity blobs only ever touch the image. A nonzero
    `ripple_wavelength` superimposes concentric ripples on geometric
    kinds: real dents are locally rough, and the ripples keep the
    deformation off the manifold of smooth nominal surfaces.
    """

    kind: str
    center: tuple[float, float, float]
    radius: float
    magnitude: float
    modality_visibility: str = "both"
    visible_views: tuple[int, ...] | None = None
    ripple_wavelength: float = 0.0

    def __post_init__(self):
        if self.kind not in (GEOMETRIC_BUMP, GEOMETRIC_DENT, INTENSITY_BLOB):
            raise ValueError(f"unknown defect kind {self.kind!r}")
        if self.radius <= 0:
            raise ValueError("defect radius must be positive")
        if self.modality_visibility not in ("both", "image_only", "depth_only"):
            raise ValueError(f"bad modality_visibility {self.modality_visibility!r}")


@dataclass(frozen=True)
class ArtefactSpec:
    """Single-view acquisition corruption; never part of ground truth."""

    kind: str
    affected_view: int
    center_px: tuple[float, float]
    radius_px: float

    def __post_init__(self):
        if self.kind not in (SPECULAR_HIGHLIGHT, DEPTH_HOLE):
            raise ValueError(f"unknown artefact kind {self.kind!r}")
        if self.radius_px <= 0:
            raise ValueError("artefact radius must be positive")


_PLATEAU = 0.6


def _falloff(x: np.ndarray) -> np.ndarray:
    """Defect profile on [0, 1]: flat plateau, then smooth cosine decay.

    The plateau keeps most of the defect area at full strength so its
    whole footprint, not only the center, is measurably anomalous.
    """
    x = np.asarray(x, dtype=np.float64)
    ramp = np.clip((x - _PLATEAU) / (1.0 - _PLATEAU), 0.0, 1.0)
    return np.where(x < 1.0, np.cos(np.pi * ramp / 2.0) ** 2, 0.0)


class Scene:
    """A textured primitive bound to one instance's texture phase.

    Nominal instances of a class share the texture's frequencies and
    base phases; only a small per-instance phase jitter distinguishes
    them, mimicking unit-to-unit appearance variation. Geometric defects
    enter as deformation fields on the implicit surface, so every view
    renders the same deformed 3D geometry.
    """

    PHASE_JITTER = 0.25

    def __init__(self, spec: SceneSpec, phase_seed: int = 0, deformations=()):
        self.spec = spec
        self._rot = spec.rotation()
        self._deforms: list[DefectSpec] = [
            d for d in deformations if d.kind in (GEOMETRIC_BUMP, GEOMETRIC_DENT)
        ]
        self._deform_axes: list[np.ndarray] = []
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
        n_waves = 6
        dirs = rng.normal(size=(n_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        mags = rng.uniform(1.5, 4.5, size=n_waves)
        self._freqs = dirs * mags[:, None]
        self._amps = rng.uniform(0.05, 0.11, size=n_waves)
        self._phases = rng.uniform(0.0, 2 * np.pi, size=n_waves)
        self._band_freq = rng.uniform(4.0, 6.0)
        self._band_phase = rng.uniform(0.0, 2 * np.pi)
        self._phase_seed = phase_seed
        inst = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(phase_seed,)))
        self._phase_shift = self.PHASE_JITTER * inst.normal(size=n_waves)

    def with_deformations(self, defects) -> "Scene":
        """Same scene and texture with extra geometric deformations."""
        return Scene(self.spec, self._phase_seed, deformations=[*self._deforms, *defects])

    # -- geometry ------------------------------------------------------

    def _to_object(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self._rot

    def bounding_radius(self) -> float:
        s = self.spec
        base = s.size[0] if s.primitive == "sphere" else float(np.linalg.norm(s.size[:3]))
        swell = sum(d.magnitude for d in self._deforms if d.kind == GEOMETRIC_BUMP)
        return base + max(0.0, swell)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Conservative axis-aligned bounds of the rotated object."""
        s = self.spec
        if s.primitive == "sphere":
            e = np.array([s.size[0]] * 3)
        else:
            e = np.abs(self._rot) @ np.asarray(s.size[:3])
        return -e, e

    def _base_implicit(self, pts: np.ndarray) -> np.ndarray:
        s = self.spec
        p = self._to_object(pts)
        if s.primitive == "sphere":
            return np.linalg.norm(p, axis=-1) - s.size[0]
        if s.primitive == "ellipsoid":
            return np.linalg.norm(p / np.asarray(s.size), axis=-1) - 1.0
        if s.primitive == "box":
            q = np.abs(p) - np.asarray(s.size)
            outside = np.linalg.norm(np.clip(q, 0.0, None), axis=-1)
            inside = np.clip(q.max(axis=-1), None, 0.0)
            return outside + inside
        a, b, c, e1, e2 = s.size
        x = np.abs(p[..., 0] / a) + 1e-12
        y = np.abs(p[..., 1] / b) + 1e-12
        z = np.abs(p[..., 2] / c) + 1e-12
        xy = (x ** (2.0 / e2) + y ** (2.0 / e2)) ** (e2 / e1)
        return xy + z ** (2.0 / e1) - 1.0

    def implicit(self, pts: np.ndarray) -> np.ndarray:
        """Negative inside, positive outside, zero on the surface.

        Deformations subtract (bump) or add (dent) a radial falloff
        around their center, moving the zero level set accordingly.
        """
        f = self._base_implicit(pts)
        if self._deforms:
            if len(self._deform_axes) != len(self._deforms):
                self._deform_axes = [
                    self._base_normal(np.asarray(d.center)) for d in self._deforms
                ]
            pts = np.asarray(pts, dtype=np.float64)
            for d, axis in zip(self._deforms, self._deform_axes):
                rel = pts - np.asarray(d.center)
                dist = np.linalg.norm(rel, axis=-1)
                sign = 1.0 if d.kind == GEOMETRIC_BUMP else -1.0
                disp = d.magnitude * _falloff(dist / d.radius)
                if d.ripple_wavelength > 0:
                    # Ripple rings ride on the lateral distance around the
                    # defect's normal axis; a full 3-D distance would fold
                    # the displacement height into the phase and the level
                    # set would smooth the rings away.
                    axial = rel @ axis
                    lateral = np.sqrt(np.clip(dist * dist - axial * axial, 0.0, None))
                    disp = disp * (0.45 + 0.55 * np.cos(2 * np.pi * lateral / d.ripple_wavelength))
                f = f - sign * disp
        return f

    def _base_normal(self, point: np.ndarray) -> np.ndarray:
        """Unit normal of the undeformed surface at a point."""
        if self.spec.primitive == "superellipsoid":
            h = 1e-5
            g = np.empty(3)
            for a in range(3):
                dp = np.zeros(3)
                dp[a] = h
                g[a] = float(
                    self._base_implicit((point + dp)[None, :])
                    - self._base_implicit((point - dp)[None, :])
                ) / (2 * h)
        else:
            g = self._axis_normal(self._to_object(point[None, :]))[0] @ self._rot.T
        return g / max(np.linalg.norm(g), 1e-12)

    def surface_distance(self, pts: np.ndarray) -> np.ndarray:
        """Distance to the surface; exact for sphere/box, first order otherwise."""
        s = self.spec
        f = self.implicit(pts)
        if s.primitive in ("sphere", "box") and not self._deforms:
            return np.abs(f)
        g = self._numeric_gradient(pts)
        return np.abs(f) / np.maximum(np.linalg.norm(g, axis=-1), 1e-9)

    def _axis_normal(self, p_obj: np.ndarray) -> np.ndarray:
        s = self.spec
        if s.primitive == "sphere":
            return p_obj.copy()
        if s.primitive == "ellipsoid":
            return p_obj / np.asarray(s.size) ** 2
        rel = p_obj / np.asarray(s.size)
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(p_obj)
        idx = np.indices(axis.shape)
        n[(*idx, axis)] = np.sign(np.take_along_axis(p_obj, axis[..., None], axis=-1))[..., 0]
        return n

    def _numeric_gradient(self, pts: np.ndarray, h: float = 1e-5) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        grad = np.empty(pts.shape)
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = h
            grad[..., a] = (self.implicit(pts + dp) - self.implicit(pts - dp)) / (2 * h)
        return grad

    def normal_at(self, pts: np.ndarray) -> np.ndarray:
        s = self.spec
        if s.primitive == "superellipsoid" or self._deforms:
            n = self._numeric_gradient(pts)
        else:
            n = self._axis_normal(self._to_object(pts)) @ self._rot.T
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)

    def _ray_hits(self, origin: np.ndarray, dirs: np.ndarray):
        """First intersection distance along unit world rays; NaN if missed."""
        s = self.spec
        if self._deforms:
            return self._ray_hits_bisect(origin, dirs)
        o = self._rot.T @ origin
        d = dirs @ self._rot
        if s.primitive == "sphere":
            r = s.size[0]
            b = d @ o
            disc = b * b - (o @ o - r * r)
            hit = disc >= 0
            t = np.where(hit, -b - np.sqrt(np.clip(disc, 0.0, None)), np.nan)
            return np.where(t > 0, t, np.nan)
        if s.primitive == "ellipsoid":
            axes = np.asarray(s.size)
            os = o / axes
            ds = d / axes
            a2 = np.einsum("...i,...i->...", ds, ds)
            b2 = ds @ os
            c2 = os @ os - 1.0
            disc = b2 * b2 - a2 * c2
            hit = disc >= 0
            t = np.where(hit, (-b2 - np.sqrt(np.clip(disc, 0.0, None))) / a2, np.nan)
            return np.where(t > 0, t, np.nan)
        if s.primitive == "box":
            e = np.asarray(s.size)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
            t1 = (-e - o) * inv
            t2 = (e - o) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
            hit = (tmax >= tmin) & (tmax > 0) & (tmin > 0)
            return np.where(hit, tmin, np.nan)
        return self._ray_hits_bisect(origin, dirs)

    def _ray_hits_bisect(self, origin: np.ndarray, dirs: np.ndarray, samples: int = 96):
        rad = self.bounding_radius() * 1.02
        b = dirs @ origin
        disc = b * b - (origin @ origin - rad * rad)
        sphere_hit = disc > 0
        sq = np.sqrt(np.clip(disc, 0.0, None))
        t_lo = np.clip(-b - sq, 0.0, None)
        t_hi = -b + sq
        t = np.full(dirs.shape[:-1], np.nan)
        if not sphere_hit.any():
            return t
        ts = np.linspace(0.0, 1.0, samples)
        flat_dirs = dirs[sphere_hit]
        lo = t_lo[sphere_hit]
        hi = t_hi[sphere_hit]
        span = hi - lo
        prev_val = self.implicit(origin + flat_dirs * lo[:, None])
        seg_lo = lo.copy()
        found = np.zeros(lo.shape, dtype=bool)
        bra_lo = np.zeros_like(lo)
        bra_hi = np.zeros_like(lo)
        for k in range(1, samples):
            cur_t = lo + span * ts[k]
            cur_val = self.implicit(origin + flat_dirs * cur_t[:, None])
            cross = (~found) & (prev_val > 0) & (cur_val <= 0)
            bra_lo[cross] = seg_lo[cross]
            bra_hi[cross] = cur_t[cross]
            found |= cross
            seg_lo = cur_t
            prev_val = cur_val
        for _ in range(48):
            mid = 0.5 * (bra_lo + bra_hi)
            val = self.implicit(origin + flat_dirs * mid[:, None])
            neg = val <= 0
            bra_hi = np.where(found & neg, mid, bra_hi)
            bra_lo = np.where(found & ~neg, mid, bra_lo)
        result = np.where(found, 0.5 * (bra_lo + bra_hi), np.nan)
        t[sphere_hit] = result
        return t

    # -- appearance ----------------------------------------------------

    def texture_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        val = np.full(pts.shape[:-1], 0.55)
        for k in range(len(self._amps)):
            val += self._amps[k] * np.cos(
                pts @ self._freqs[k] + self._phases[k] + self._phase_shift[k]
            )
        val += 0.15 * np.cos(self._band_freq * pts[..., 2] + self._band_phase)
        return np.clip(val, 0.08, 1.0)

    def shade(self, pts: np.ndarray, normals: np.ndarray) -> np.ndarray:
        lambert = self.spec.ambient + (1.0 - self.spec.ambient) * np.clip(
            normals @ LIGHT_DIR, 0.0, None
        )
        return np.clip(self.texture_at(pts) * lambert, 0.0, 1.0)

    # -- rendering -----------------------------------------------------

    def cameras(self) -> list[CameraCalib]:
        s = self.spec
        res = s.resolution
        focal = s.focal * res / 128.0
        k = make_intrinsics(focal, focal, (res - 1) / 2.0, (res - 1) / 2.0)
        calibs = []
        for i in range(s.n_views):
            theta = 2 * np.pi * i / s.n_views
            pos = np.array(
                [
                    s.ring_radius * math.cos(s.elevation) * math.cos(theta),
                    s.ring_radius * math.cos(s.elevation) * math.sin(theta),
                    s.ring_radius * math.sin(s.elevation),
                ]
            )
            calibs.append(CameraCalib(intrinsics=k, cam_to_world=look_at(pos, (0, 0, 0))))
        return calibs

    def render_view(self, view_index: int, calib: CameraCalib, pixel_mask: np.ndarray | None = None):
        """Ray-cast one view; with a mask only those pixels are cast.

        Returns (depth, image) covering the full frame (masked-out
        pixels hold background values when a mask is given).
        """
        s = self.spec
        res = s.resolution
        us, vs = np.meshgrid(np.arange(res), np.arange(res), indexing="xy")
        if pixel_mask is not None:
            us = us[pixel_mask]
            vs = vs[pixel_mask]
        dirs_cam = np.stack(
            [
                (us - calib.cx) / calib.fx,
                (vs - calib.cy) / calib.fy,
                np.ones_like(us, dtype=np.float64),
            ],
            axis=-1,
        )
        norms = np.linalg.norm(dirs_cam, axis=-1, keepdims=True)
        r = calib.cam_to_world[:3, :3]
        dirs = (dirs_cam / norms) @ r.T
        origin = calib.position
        t = self._ray_hits(origin, dirs)
        hit = np.isfinite(t)
        depth = np.zeros((res, res), dtype=np.float32)
        image = np.full((res, res), s.background_intensity, dtype=np.float32)
        if hit.any():
            pts = origin + dirs[hit] * t[hit][:, None]
            cam_z = (pts - origin) @ r[:, 2]
            normals = self.normal_at(pts)
            shade = self.shade(pts, normals)
            if pixel_mask is None:
                depth[hit] = cam_z.astype(np.float32)
                image[hit] = shade.astype(np.float32)
            else:
                depth[vs[hit], us[hit]] = cam_z.astype(np.float32)
                image[vs[hit], us[hit]] = shade.astype(np.float32)
        return depth, image

    def render(self) -> tuple[list[ViewSample], tuple[np.ndarray, np.ndarray]]:
        """Ray-cast all views; returns (views, object AABB)."""
        views = []
        for i, calib in enumerate(self.cameras()):
            depth, image = self.render_view(i, calib)
            views.append(ViewSample(view_index=i, image=image, depth=depth, calib=calib))
        return views, self.bounds()


def make_scene(spec: SceneSpec, phase_seed: int = 0) -> Scene:
    return Scene(spec, phase_seed)


def render_views(spec: SceneSpec, phase_seed: int = 0):
    return make_scene(spec, phase_seed).render()


def _prune_slivers(gt: np.ndarray, min_voxels: int) -> np.ndarray:
    """Drop sub-resolution components created by shell quantization."""
    from .metrics import connected_components

    labels = connected_components(gt)
    out = np.zeros_like(gt)
    for rid in np.unique(labels[labels > 0]):
        mask = labels == rid
        if mask.sum() >= min_voxels:
            out |= mask
    return out


def _visible_points(view: ViewSample):
    """World points and pixel indices of a view's valid-depth pixels."""
    vs, us = np.nonzero(view.depth > 0)
    pts = unproject(us, vs, view.depth[vs, us], view.calib)
    return pts, vs, us


def inject_defect(
    views: list[ViewSample],
    grid_spec: GridSpec,
    defect: DefectSpec,
    scene: Scene,
    gt_halo: float = 0.0,
) -> tuple[list[ViewSample], np.ndarray]:
    """Apply a defect and return (modified views, ground-truth voxel mask).

    Ground truth marks voxels near the DEFECTIVE surface sheet: within
    the defect radius (laterally) of its center and within one voxel of
    the surface displaced by the defect. `gt_halo` widens both bounds by
    the scoring resolution (one feature patch in world units), since
    patch-level scores cannot localize tighter than that.
    """
    center = np.asarray(defect.center, dtype=np.float64)
    if float(scene.surface_distance(center[None, :])[0]) > 0.05 * scene.bounding_radius():
        raise ValueError(f"defect center {defect.center} is off the object surface")

    gt = np.zeros(grid_spec.dims, dtype=bool)
    if defect.magnitude == 0.0:
        return [ViewSample(v.view_index, v.image.copy(), v.depth.copy(), v.calib) for v in views], gt

    deformed = scene.with_deformations([defect]) if defect.kind != INTENSITY_BLOB else scene
    centers = grid_spec.voxel_centers().reshape(-1, 3)
    dist = np.linalg.norm(centers - center, axis=1)
    near = dist <= defect.radius + gt_halo
    if near.any():
        shell = deformed.surface_distance(centers[near]) <= grid_spec.voxel_size + 0.5 * gt_halo
        mask = np.zeros(len(centers), dtype=bool)
        mask[np.nonzero(near)[0][shell]] = True
        gt = mask.reshape(grid_spec.dims)

    out_views = []
    reach = defect.radius + abs(defect.magnitude) + 0.1
    for v in views:
        image = v.image.copy()
        depth = v.depth.copy()
        if defect.visible_views is None or v.view_index in defect.visible_views:
            if defect.kind == INTENSITY_BLOB:
                pts, vs, us = _visible_points(v)
                d = np.linalg.norm(pts - center, axis=1)
                sel = d <= defect.radius
                if sel.any():
                    g = _falloff(d[sel] / defect.radius)
                    image[vs[sel], us[sel]] = np.clip(
                        image[vs[sel], us[sel]] + defect.magnitude * g, 0.0, 1.0
                    )
            else:
                # Re-cast the rays around the defect against the deformed
                # surface so every view sees the same 3D geometry.
                pix = _defect_pixel_mask(v, center, reach)
                if pix.any():
                    new_depth, new_image = deformed.render_view(v.view_index, v.calib, pix)
                    if defect.modality_visibility != "image_only":
                        depth[pix] = new_depth[pix]
                    if defect.modality_visibility != "depth_only":
                        image[pix] = new_image[pix]
        out_views.append(ViewSample(v.view_index, image, depth, v.calib))
    return out_views, gt


def _defect_pixel_mask(view: ViewSample, center: np.ndarray, reach: float) -> np.ndarray:
    """Pixels whose ray could intersect a ball around the defect center."""
    from .geometry import project

    u0, v0, z = project(center[None, :], view.calib)
    h, w = view.depth.shape
    if z[0] <= 0:
        return np.zeros((h, w), dtype=bool)
    r_px = view.calib.fx * reach / max(z[0] - reach, 0.2)
    us, vs = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    return np.hypot(us - u0[0], vs - v0[0]) <= r_px


def inject_artefact(views: list[ViewSample], artefact: ArtefactSpec) -> list[ViewSample]:
    """Apply a single-view acquisition artefact; idempotent by design."""
    if not (0 <= artefact.affected_view < len(views)):
        raise ValueError(f"affected_view {artefact.affected_view} out of range")
    out = []
    for v in views:
        if v.view_index != artefact.affected_view:
            out.append(v)
            continue
        image = v.image.copy()
        depth = v.depth.copy()
        h, w = image.shape
        us, vs = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
        cu, cv = artefact.center_px
        r = np.hypot(us - cu, vs - cv) / artefact.radius_px
        if artefact.kind == SPECULAR_HIGHLIGHT:
            target = np.clip(1.0 - r * r, 0.0, None)
            image = np.maximum(image, target.astype(np.float32))
        else:
            depth[r <= 1.0] = 0.0
        out.append(ViewSample(v.view_index, image, depth, v.calib))
    return out


# ---------------------------------------------------------------------------
# Benchmark dataset


@dataclass(frozen=True)
class ClassSpec:
    name: str
    scene: SceneSpec


def default_classes(seed: int, n_views: int = 8, resolution: int = 128) -> list[ClassSpec]:
    # The off-axis pose keeps every camera away from the objects'
    # symmetry planes so view identity is recoverable from depth.
    return [
        ClassSpec(
            name="orb",
            scene=SceneSpec(
                primitive="ellipsoid", size=(1.0, 0.82, 0.68), n_views=n_views,
                resolution=resolution, yaw=0.26, tilt=0.12, seed=seed * 1000 + 1,
            ),
        ),
        ClassSpec(
            name="block",
            scene=SceneSpec(
                primitive="superellipsoid", size=(0.95, 0.8, 0.65, 0.55, 0.55),
                n_views=n_views, resolution=resolution, yaw=0.26, tilt=0.12,
                seed=seed * 1000 + 2,
            ),
        ),
    ]


def _sample_surface_point(scene: Scene, rng: np.random.Generator) -> np.ndarray:
    """Random surface point facing the camera ring.

    The band excludes the poles and the under-side: points there are
    seen only at grazing incidence, where surface displacements barely
    change any depth map and defects would be invisible by construction.
    """
    while True:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        if not (0.05 <= d[2] <= 0.55):
            continue
        lo, hi = 1e-3, scene.bounding_radius() * 1.5
        if scene.implicit((d * hi)[None, :])[0] <= 0:
            continue
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if scene.implicit((d * mid)[None, :])[0] <= 0:
                lo = mid
            else:
                hi = mid
        return d * 0.5 * (lo + hi)


def _best_facing_view(scene: Scene, center: np.ndarray) -> int:
    """View whose camera most directly faces the surface normal."""
    n = scene.normal_at(center[None, :])[0]
    best, best_dot = 0, -np.inf
    for i, calib in enumerate(scene.cameras()):
        to_cam = calib.position - center
        dot = float(n @ (to_cam / np.linalg.norm(to_cam)))
        if dot > best_dot:
            best, best_dot = i, dot
    return best


def _sample_defects(scene: Scene, rng: np.random.Generator, role: int) -> list[DefectSpec]:
    """Defect set for one defective instance; roles pin coverage.

    Role 0: image-only blob. Role 1: depth-only bump. Role 2: defect
    visible in exactly one view. Role 3: subtle sub-patch bump. Others:
    1-3 mixed defects.
    """
    scale = scene.bounding_radius()

    def point():
        return tuple(float(x) for x in _sample_surface_point(scene, rng))

    if role == 0:
        return [DefectSpec(INTENSITY_BLOB, point(), radius=0.32 * scale, magnitude=-0.7)]

    if role == 1:
        return [
            DefectSpec(
                GEOMETRIC_BUMP, point(), radius=0.3 * scale, magnitude=0.5 * scale,
                modality_visibility="depth_only",
            )
        ]
    if role == 2:
        center = point()
        view = _best_facing_view(scene, np.asarray(center))
        return [
            DefectSpec(
                GEOMETRIC_BUMP, center, radius=0.3 * scale, magnitude=0.5 * scale,
                visible_views=(view,),
            )
        ]
    if role == 3:
        return [DefectSpec(GEOMETRIC_BUMP, point(), radius=0.07 * scale, magnitude=0.05 * scale)]
    defects = []
    n = int(rng.integers(1, 4))
    # First defect is always a strong responder kind (bump or absorbing
    # blob); dents may ride along but respond weakly by nature, since
    # they push relief away from the encoder's reference depth.
    kinds = [GEOMETRIC_BUMP if rng.random() < 0.5 else INTENSITY_BLOB]
    kinds += [
        [GEOMETRIC_BUMP, GEOMETRIC_DENT, INTENSITY_BLOB][int(rng.integers(3))]
        for _ in range(n - 1)
    ]
    for kind in kinds:
        if kind == INTENSITY_BLOB:
            # Absorbing marks only: a brightness gain moves descriptors
            # almost parallel to themselves and cosine scoring is blind
            # to it, so bright blobs would not be credible defects here.
            mag = float(rng.uniform(-0.75, -0.55))
            defects.append(DefectSpec(kind, point(), radius=float(rng.uniform(0.26, 0.36)) * scale, magnitude=mag))
        else:
            mag = float(rng.uniform(0.42, 0.58)) if kind == GEOMETRIC_BUMP else float(rng.uniform(0.33, 0.45))
            defects.append(
                DefectSpec(
                    kind, point(), radius=float(rng.uniform(0.24, 0.34)) * scale,
                    magnitude=mag * scale,
                )
            )
    return defects


def _sample_artefacts(
    views: list[ViewSample],
    rng: np.random.Generator,
    defects: list[DefectSpec],
    scene: Scene,
) -> list[ArtefactSpec]:
    """One specular highlight and one depth hole, clear of all defects."""
    arts = []
    keepout = 0.45 * scene.bounding_radius()
    for kind in (SPECULAR_HIGHLIGHT, DEPTH_HOLE):
        for _ in range(200):
            view = int(rng.integers(len(views)))
            v = views[view]
            on = np.argwhere(v.depth > 0)
            pv, pu = on[int(rng.integers(len(on)))]
            margin = int(np.ceil(20.0)) + 4
            res = v.depth.shape[0]
            if not (margin <= pu < res - margin and margin <= pv < res - margin):
                continue
            pt = unproject(pu, pv, v.depth[pv, pu], v.calib)
            if any(np.linalg.norm(pt - np.asarray(d.center)) < keepout + d.radius for d in defects):
                continue
            # Specular discs stay below one patch so no cell is fully
            # saturated; depth holes span patches so their core is masked.
            radius = rng.uniform(12.0, 15.0) if kind == SPECULAR_HIGHLIGHT else rng.uniform(10.0, 14.0)
            arts.append(ArtefactSpec(kind, view, (float(pu), float(pv)), radius_px=float(radius)))
            break
        else:
            raise RuntimeError("could not place artefact clear of defects")
    return arts


def write_instance(inst_dir: Path, views: list[ViewSample]) -> None:
    for v in views:
        vdir = inst_dir / f"view_{v.view_index}"
        vdir.mkdir(parents=True, exist_ok=True)
        tensorio.write_pgm(vdir / "image.pgm", v.image)
        tensorio.write_tensor(vdir / "depth.mmtf", v.depth)
        calib = {
            "K": v.calib.intrinsics.tolist(),
            "T": v.calib.cam_to_world.tolist(),
            "width": int(v.image.shape[1]),
            "height": int(v.image.shape[0]),
        }
        (vdir / "calib.json").write_bytes(tensorio.canonical_json(calib))


def load_instance(inst_dir: Path, n_views: int) -> list[ViewSample]:
    views = []
    for i in range(n_views):
        vdir = Path(inst_dir) / f"view_{i}"
        image = tensorio.read_pgm(vdir / "image.pgm")
        depth = tensorio.read_tensor(vdir / "depth.mmtf")
        calib_raw = json.loads((vdir / "calib.json").read_text())
        calib = CameraCalib(
            intrinsics=np.asarray(calib_raw["K"]),
            cam_to_world=np.asarray(calib_raw["T"]),
        )
        views.append(ViewSample(view_index=i, image=image, depth=depth, calib=calib))
    return views


def load_manifest(root: Path) -> dict:
    return json.loads((Path(root) / MANIFEST_NAME).read_text())


def _defect_record(d: DefectSpec) -> dict:
    return {
        "kind": d.kind,
        "center": [float(x) for x in d.center],
        "radius": float(d.radius),
        "magnitude": float(d.magnitude),
        "modality_visibility": d.modality_visibility,
        "visible_views": list(d.visible_views) if d.visible_views is not None else None,
        "ripple_wavelength": float(d.ripple_wavelength),
    }


def _artefact_record(a: ArtefactSpec) -> dict:
    return {
        "kind": a.kind,
        "affected_view": int(a.affected_view),
        "center_px": [float(a.center_px[0]), float(a.center_px[1])],
        "radius_px": float(a.radius_px),
    }


def make_benchmark(
    root: Path | str,
    seed: int = 0,
    classes: list[ClassSpec] | None = None,
    n_nominal_test: int = 6,
    n_defective_test: int = 10,
    grid_max_dim: int = 48,
) -> dict:
    """Write the full benchmark dataset and return its manifest.

    Per class: one nominal training instance, nominal test instances
    differing only by texture phase, and defective test instances with
    1-3 defects each. Every test instance additionally carries one
    specular highlight and one depth-hole artefact.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    classes = classes if classes is not None else default_classes(seed)
    manifest = {"format": 1, "seed": int(seed), "categories": []}
    for ci, cspec in enumerate(classes):
        cat_dir = root / cspec.name
        train_scene = make_scene(cspec.scene, phase_seed=0)
        train_views, _ = train_scene.render()

        # Generous padding so geometry displaced by defects stays inside.
        pts = np.concatenate([_visible_points(v)[0] for v in train_views])
        grid = fit_grid_spec(pts, pad_fraction=0.26, max_dim=grid_max_dim)

        cat = {
            "name": cspec.name,
            "primitive": cspec.scene.primitive,
            "size": list(cspec.scene.size),
            "n_views": cspec.scene.n_views,
            "resolution": cspec.scene.resolution,
            "scene_seed": cspec.scene.seed,
            "grid": grid.to_dict(),
            "instances": [],
        }

        write_instance(cat_dir / "train" / "train_000", train_views)
        cat["instances"].append(
            {"id": "train_000", "split": "train", "label": 0, "phase": 0,
             "defects": [], "artefacts": []}
        )

        n_test = n_nominal_test + n_defective_test
        for k in range(n_test):
            phase = k + 1
            defective = k >= n_nominal_test
            inst_id = f"test_{k:03d}"
            scene = make_scene(cspec.scene, phase_seed=phase)
            views, _ = scene.render()
            rng = np.random.default_rng(
                np.random.SeedSequence(seed, spawn_key=(ci, k))
            )
            gt = np.zeros(grid.dims, dtype=bool)
            defects: list[DefectSpec] = []
            if defective:
                # Scores live on the patch grid; ground truth cannot be
                # tighter than one patch footprint in world units.
                halo = 2.0 * cspec.scene.patch_world_size()
                defects = _sample_defects(scene, rng, role=k - n_nominal_test)
                for d in defects:
                    views, dg = inject_defect(views, grid, d, scene, gt_halo=halo)
                    gt |= dg
                gt = _prune_slivers(gt, min_voxels=4)
            artefacts = _sample_artefacts(views, rng, defects, scene)
            for a in artefacts:
                views = inject_artefact(views, a)

            inst_dir = cat_dir / "test" / inst_id
            write_instance(inst_dir, views)
            tensorio.write_tensor(inst_dir / "gt_volume.mmtf", gt.astype(np.float32))
            (inst_dir / "label.txt").write_text(f"{int(defective)}\n")
            cat["instances"].append(
                {
                    "id": inst_id,
                    "split": "test",
                    "label": int(defective),
                    "phase": phase,
                    "defects": [_defect_record(d) for d in defects],
                    "artefacts": [_artefact_record(a) for a in artefacts],
                }
            )
        manifest["categories"].append(cat)
    (root / MANIFEST_NAME).write_bytes(tensorio.canonical_json(manifest))
    return manifest
