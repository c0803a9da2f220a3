"""Synthetic scenes, camera sampling, episode rendering and NOCS corruption."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptyMesh, InvalidSpec
from .geometry import CameraIntrinsics, PoseSE3, SphericalPose
from .posesolve import NocsMap
from .raster import (NocsNormalization, TriangleMesh, align_azimuth, normalize_to_nocs,
                     rasterize)

PRIMITIVE_KINDS = ("box", "sphere", "cylinder", "composite-marker")
COLOR_PATTERNS = ("solid", "gradient", "random", "checker")
FOV_RANGE_DEG = (5.0, 65.0)


@dataclass(frozen=True)
class CameraSamplerConfig:
    width: int = 256
    height: int = 256
    fov_mean: float = 36.0
    fov_std: float = 9.0
    elevation_range: tuple = (-10.0, 50.0)
    azimuth_range: tuple = (0.0, 360.0)
    radius_range: tuple = (1.8, 3.2)
    principal_point_std: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    outlier_fraction: float = 0.0
    boundary_erosion_px: int = 0
    # probability of replacing the view by its 180-degree symmetric NOCS reading
    flip_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.gaussian_sigma, self.outlier_fraction, self.boundary_erosion_px, self.flip_probability) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.outlier_fraction > 1 or self.flip_probability > 1:
            raise ValueError("fractions must be <= 1")

    def is_identity(self) -> bool:
        return not (self.gaussian_sigma or self.outlier_fraction or self.boundary_erosion_px
                    or self.flip_probability)


# ---------------------------------------------------------------------------
# primitives


def _grid_box(lo, hi, n: int):
    """Closed box surface with each face split into an n x n quad grid."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts: list = []
    index: dict = {}
    tris = []

    def vid(p):
        key = tuple(int(c) for c in p)
        if key not in index:
            index[key] = len(verts)
            verts.append(lo + (hi - lo) * np.asarray(p, float) / n)
        return index[key]

    # each face: (fixed axis, fixed value, u axis, v axis), wound outward
    faces = [(0, 0, 2, 1), (0, n, 1, 2), (1, 0, 0, 2), (1, n, 2, 0), (2, 0, 1, 0), (2, n, 0, 1)]
    for axis, val, ua, va in faces:
        for a in range(n):
            for b in range(n):
                quad = []
                for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                    p = [0, 0, 0]
                    p[axis], p[ua], p[va] = val, a + da, b + db
                    quad.append(vid(p))
                tris.append([quad[0], quad[1], quad[2]])
                tris.append([quad[0], quad[2], quad[3]])
    return np.array(verts), np.array(tris)


def _icosphere(level: int):
    t = (1.0 + 5 ** 0.5) / 2.0
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(level):
        cache: dict = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return np.array(verts), np.array(f)


def _cylinder(radius: float, height: float, segments: int, stacks: int = 1):
    """Capped cylinder along +y with ``stacks`` rings of side quads."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.sin(ang), np.zeros(segments), radius * np.cos(ang)], axis=1)
    ys = np.linspace(-height / 2, height / 2, stacks + 1)
    verts = np.vstack([ring + [0, y, 0] for y in ys] + [[[0, -height / 2, 0], [0, height / 2, 0]]])
    cb, ct = (stacks + 1) * segments, (stacks + 1) * segments + 1
    top = stacks * segments
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        for s in range(stacks):
            a, b = s * segments, (s + 1) * segments
            tris += [[a + i, a + j, b + j], [a + i, b + j, b + i]]
        tris += [[cb, j, i], [ct, top + i, top + j]]
    return verts, np.array(tris)


def _merge(parts):
    verts, tris, off = [], [], 0
    for v, f in parts:
        verts.append(v)
        tris.append(f + off)
        off += len(v)
    return np.vstack(verts), np.vstack(tris)


def _colorize(verts: np.ndarray, pattern: str, rng: np.random.Generator, base=None) -> np.ndarray:
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    unit = (verts - lo) / np.where(hi > lo, hi - lo, 1.0)
    if pattern == "solid":
        c = np.asarray(base if base is not None else rng.uniform(0.2, 0.9, 3), float)
        return np.tile(c, (len(verts), 1))
    if pattern == "gradient":
        return 0.15 + 0.7 * unit
    if pattern == "random":
        return rng.uniform(0.05, 0.95, (len(verts), 3))
    if pattern == "checker":
        cells = np.floor(unit * 4.0 + 1e-9).astype(int).sum(axis=1) % 2
        a, b = rng.uniform(0.1, 0.5, 3), rng.uniform(0.5, 0.95, 3)
        return np.where(cells[:, None] == 1, a, b)
    raise InvalidSpec(f"unknown color pattern {pattern!r}")


def make_primitive_scene(spec: dict, seed: int = 0) -> TriangleMesh:
    """Procedural watertight test mesh with per-vertex colours.

    ``spec`` keys: ``kind`` (box, sphere, cylinder, composite-marker),
    ``dimensions`` (box extents / sphere radius / cylinder radius and height /
    marker body size), ``color`` (solid, gradient, random, checker) and the
    optional tessellation knobs ``subdivisions`` (box faces, sphere level,
    cylinder stacks) and
    ``segments`` (cylinder).
    """
    kind = spec.get("kind")
    if kind not in PRIMITIVE_KINDS:
        raise InvalidSpec(f"unknown primitive kind {kind!r}")
    rng = np.random.default_rng(seed)
    dims = np.atleast_1d(np.asarray(spec.get("dimensions", [1.0]), dtype=float))
    if np.any(dims <= 0):
        raise InvalidSpec("dimensions must be positive")
    pattern = spec.get("color", "random")
    if pattern not in COLOR_PATTERNS:
        raise InvalidSpec(f"unknown color pattern {pattern!r}")

    if kind == "box":
        ext = np.broadcast_to(dims, (3,)) if dims.size in (1, 3) else None
        if ext is None:
            raise InvalidSpec("box dimensions need 1 or 3 values")
        v, f = _grid_box(-ext / 2, ext / 2, int(spec.get("subdivisions", 1)))
    elif kind == "sphere":
        v, f = _icosphere(int(spec.get("subdivisions", 3)))
        v = v * dims[0]
    elif kind == "cylinder":
        r, h = (dims[0], dims[1]) if dims.size >= 2 else (dims[0], 2 * dims[0])
        v, f = _cylinder(r, h, int(spec.get("segments", 32)), int(spec.get("subdivisions", 1)))
    else:
        v, f = _marker(float(dims[0]), int(spec.get("subdivisions", 2)), rng)
    return TriangleMesh(v, f, vertex_color=_colorize(v, pattern, rng, spec.get("base_color")))


def _marker(size: float, subdivisions: int, rng: np.random.Generator):
    """Box body with three differently sized nubs on the +x, +y and +z faces.

    The nubs have pairwise distinct sizes and sit off-centre, so any rotation
    mapping the shape onto itself must fix each nub, hence is the identity.
    """
    h = size / 2
    parts = [_grid_box([-h, -h, -h], [h, h, h], subdivisions)]
    jitter = rng.uniform(-0.05, 0.05, 3) * size
    nubs = [
        (0, np.array([0.22, 0.10]) * size + jitter[:2], 0.30 * size),
        (1, np.array([-0.20, 0.15]) * size + jitter[1:], 0.20 * size),
        (2, np.array([0.12, -0.24]) * size + jitter[[0, 2]], 0.12 * size),
    ]
    for axis, (pu, pv), s in nubs:
        others = [a for a in range(3) if a != axis]
        lo, hi = np.zeros(3), np.zeros(3)
        lo[axis], hi[axis] = h, h + s
        lo[others[0]], hi[others[0]] = pu - s / 2, pu + s / 2
        lo[others[1]], hi[others[1]] = pv - s / 2, pv + s / 2
        parts.append(_grid_box(lo, hi, 1))
    return _merge(parts)


# ---------------------------------------------------------------------------
# cameras and episodes


def sample_fov(cfg: CameraSamplerConfig, rng: np.random.Generator) -> float:
    fov = rng.normal(cfg.fov_mean, cfg.fov_std) if cfg.fov_std > 0 else cfg.fov_mean
    return float(np.clip(fov, *FOV_RANGE_DEG))


def _sample_camera(cfg: CameraSamplerConfig, rng: np.random.Generator):
    fov = sample_fov(cfg, rng)
    f = (cfg.width / 2.0) / np.tan(np.deg2rad(fov) / 2.0)
    cx, cy = cfg.width / 2.0, cfg.height / 2.0
    if cfg.principal_point_std > 0:
        cx = float(np.clip(cx + rng.normal(0, cfg.principal_point_std), 0, cfg.width - 1e-6))
        cy = float(np.clip(cy + rng.normal(0, cfg.principal_point_std), 0, cfg.height - 1e-6))
    k = CameraIntrinsics(f, f, cx, cy, cfg.width, cfg.height)
    sph = SphericalPose(
        float(rng.uniform(*cfg.elevation_range)),
        float(rng.uniform(*cfg.azimuth_range)),
        float(rng.uniform(*cfg.radius_range)),
    )
    return k, sph


def sample_camera(cfg: CameraSamplerConfig) -> tuple[CameraIntrinsics, PoseSE3]:
    """One camera: FOV ~ N(fov_mean, fov_std^2) clamped, look-at pose in the configured box."""
    k, sph = _sample_camera(cfg, np.random.default_rng(cfg.seed))
    return k, sph.to_pose()


@dataclass
class EpisodeView:
    rgb: np.ndarray
    mask: np.ndarray
    nocs: NocsMap
    intrinsics: CameraIntrinsics
    pose: PoseSE3
    depth: Optional[np.ndarray] = None


@dataclass
class Episode:
    mesh: TriangleMesh  # geometry in the NOCS frame
    views: list
    nocs_frame: NocsNormalization
    phi0: float
    seed: int
    spherical: list = field(default_factory=list)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def poses(self) -> list:
        return [v.pose for v in self.views]


def make_episode(mesh: TriangleMesh, n_views: int, cfg: CameraSamplerConfig = CameraSamplerConfig(),
                 seed: int = 0, supersample: int = 4) -> Episode:
    """Render ground-truth views of ``mesh`` in a NOCS frame aligned to the first view.

    Cameras are sampled in the object's normalized frame; the object is then
    rotated so the first camera's azimuth becomes zero and re-normalized, and
    every camera is re-expressed in that NOCS frame.
    """
    if mesh.is_empty():
        raise EmptyMesh("episode mesh is empty")
    if not 1 <= n_views <= 6:
        raise ValueError("n_views must be within [1, 6]")
    rng = np.random.default_rng(seed)
    cams = [_sample_camera(cfg, rng) for _ in range(n_views)]
    phi0 = cams[0][1].azimuth
    normalized, record = normalize_to_nocs(mesh)
    aligned, record = align_azimuth(normalized, phi0, record)
    scene = aligned.nocs_geometry()
    views, spherical = [], []
    for k, sph in cams:
        local = SphericalPose(sph.elevation, sph.azimuth - phi0, sph.radius)
        pose = local.to_pose()
        buf = rasterize(scene, pose, k, supersample)
        valid = buf.valid
        nocs = NocsMap(np.where(valid[..., None], buf.nocs, 0.0), valid)
        views.append(EpisodeView(buf.rgb, buf.mask, nocs, k, pose, buf.depth))
        spherical.append(local)
    return Episode(scene, views, record, float(phi0), seed, spherical)


# ---------------------------------------------------------------------------
# corruption


def flip_nocs_coords(coords: np.ndarray) -> np.ndarray:
    """NOCS reading rotated 180 degrees about the vertical axis through the cube centre."""
    out = np.array(coords, dtype=np.float64, copy=True)
    out[..., 0] = 1.0 - out[..., 0]
    out[..., 2] = 1.0 - out[..., 2]
    return out


def corrupt_nocs(nocs_map: NocsMap, spec: NoiseSpec, return_outliers: bool = False):
    """Apply, in order: symmetric flip, boundary erosion, Gaussian noise, outlier replacement.

    Exactly ``floor(outlier_fraction * n_valid)`` valid pixels (counted after
    erosion) receive uniform random coordinates. With ``return_outliers`` the
    (H, W) boolean mask of replaced pixels is returned as well.
    """
    rng = np.random.default_rng(spec.seed)
    coords = nocs_map.coords.copy()
    valid = nocs_map.valid.copy()
    outliers = np.zeros_like(valid)
    if spec.is_identity():
        out = NocsMap(coords, valid)
        return (out, outliers) if return_outliers else out
    if spec.flip_probability > 0 and rng.random() < spec.flip_probability:
        coords = np.where(valid[..., None], flip_nocs_coords(coords), 0.0)
    if spec.boundary_erosion_px > 0:
        valid = ndimage.binary_erosion(valid, iterations=int(spec.boundary_erosion_px))
        coords[~valid] = 0.0
    if spec.gaussian_sigma > 0:
        noise = rng.normal(0.0, spec.gaussian_sigma, coords.shape)
        coords = np.where(valid[..., None], np.clip(coords + noise, 0.0, 1.0), coords)
    if spec.outlier_fraction > 0:
        idx = np.flatnonzero(valid)
        n_out = int(np.floor(spec.outlier_fraction * len(idx)))
        chosen = np.sort(rng.choice(idx, n_out, replace=False)) if n_out else idx[:0]
        flat = coords.reshape(-1, 3)
        flat[chosen] = rng.uniform(0.0, 1.0, (n_out, 3))
        outliers.reshape(-1)[chosen] = True
    out = NocsMap(coords, valid)
    return (out, outliers) if return_outliers else out
