"""Deterministic z-buffer rasterizer for vertex-attributed triangle meshes.

Each pixel is sampled on a regular ``supersample x supersample`` grid. The
nearest surface wins per sub-sample (no backface culling, lower triangle
index wins exact depth ties); pixel values are averages over the covered
sub-samples and the mask is the covered fraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .errors import EmptyMesh
from .geometry import CameraIntrinsics, NOCS_CENTER, PoseSE3
from .posesolve import NocsMap

# Triangles with a vertex closer than this (camera z) are not drawn.
NEAR_PLANE = 1e-3


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_nocs: Optional[np.ndarray] = None
    vertex_color: Optional[np.ndarray] = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        for name in ("vertex_nocs", "vertex_color"):
            a = getattr(self, name)
            if a is not None:
                a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 3)
                if len(a) != len(v):
                    raise ValueError(f"{name} must have one row per vertex")
                object.__setattr__(self, name, a)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_vertices == 0 or self.n_triangles == 0

    def colors(self) -> np.ndarray:
        if self.vertex_color is None:
            return np.full((self.n_vertices, 3), 0.5)
        return self.vertex_color

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.triangles, self.vertex_nocs, self.vertex_color)

    def nocs_geometry(self) -> "TriangleMesh":
        """The mesh placed in its NOCS frame (vertices replaced by NOCS coordinates)."""
        if self.vertex_nocs is None:
            raise ValueError("mesh has no NOCS coordinates")
        return TriangleMesh(self.vertex_nocs, self.triangles, self.vertex_nocs, self.vertex_color)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True)
class NocsNormalization:
    """Similarity nocs = scale * rotation @ v + offset applied to mesh vertices."""

    scale: float
    offset: np.ndarray
    rotation: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64).reshape(3))
        rot = np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", rot.reshape(3, 3))

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.offset

    def invert(self, nocs) -> np.ndarray:
        return ((np.asarray(nocs, dtype=np.float64) - self.offset) / self.scale) @ self.rotation

    def to_json(self) -> dict:
        return {"scale": float(self.scale), "offset": self.offset.tolist(),
                "rotation": self.rotation.tolist()}


@dataclass
class RenderBuffers:
    rgb: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    nocs: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.mask > 0.5


def _fit_unit_cube(points: np.ndarray) -> tuple[float, np.ndarray]:
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float((hi - lo).max())
    scale = 1.0 / extent if extent > 0 else 1.0
    center = (lo + hi) / 2.0
    return scale, NOCS_CENTER - scale * center


def normalize_to_nocs(mesh: TriangleMesh) -> tuple[TriangleMesh, NocsNormalization]:
    """Fit the bounding box into [0,1]^3: uniform scale, centred on every axis."""
    if mesh.n_vertices == 0:
        raise EmptyMesh("cannot normalize a mesh without vertices")
    scale, offset = _fit_unit_cube(mesh.vertices)
    nocs = np.clip(scale * mesh.vertices + offset, 0.0, 1.0)
    record = NocsNormalization(scale, offset)
    return TriangleMesh(mesh.vertices, mesh.triangles, nocs, mesh.vertex_color), record


def azimuth_rotation(phi_deg: float) -> np.ndarray:
    """Rotation about +y that carries azimuth ``phi_deg`` to azimuth zero."""
    a = np.deg2rad(-phi_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def align_azimuth(mesh: TriangleMesh, phi0: float, record: Optional[NocsNormalization] = None):
    """Rotate NOCS coordinates so azimuth ``phi0`` becomes the zero azimuth.

    Returns the re-normalized mesh and the composite vertices -> NOCS record
    (``record`` is the normalization previously applied, identity if None).
    """
    if mesh.vertex_nocs is None:
        raise ValueError("mesh has no NOCS coordinates; call normalize_to_nocs first")
    rot = azimuth_rotation(phi0)
    rotated = (mesh.vertex_nocs - NOCS_CENTER) @ rot.T + NOCS_CENTER
    scale, offset = _fit_unit_cube(rotated)
    nocs = np.clip(scale * rotated + offset, 0.0, 1.0)
    if record is None:
        record = NocsNormalization(1.0, np.zeros(3))
    # compose: nocs = scale * (rot @ (s0 R0 v + o0 - c) + c) + offset
    composite = NocsNormalization(
        scale * record.scale,
        scale * (rot @ (record.offset - NOCS_CENTER) + NOCS_CENTER) + offset,
        rot @ record.rotation,
    )
    return TriangleMesh(mesh.vertices, mesh.triangles, nocs, mesh.vertex_color), composite


def apply_azimuth_alignment(mesh: TriangleMesh, phi0: float) -> TriangleMesh:
    """Make the view at azimuth ``phi0`` the NOCS zero-azimuth (forward) direction."""
    return align_azimuth(mesh, phi0)[0]


@numba.njit(cache=True)
def _edge_coefficients(us, vs, tris):
    """Affine edge functions E(p) = a*x + b*y + c, one per (triangle, opposite vertex).

    Each shared edge is parameterized from its lower-index endpoint so both
    neighbouring triangles evaluate bitwise-negated values (no cracks).
    Coefficients are sign-normalized so the interior is E >= 0.
    """
    nt = tris.shape[0]
    coef = np.zeros((nt, 3, 3))
    ok = np.zeros(nt, dtype=np.bool_)
    for t in range(nt):
        for e in range(3):
            ia = tris[t, (e + 1) % 3]
            ib = tris[t, (e + 2) % 3]
            flip = 1.0
            if ia > ib:
                ia, ib = ib, ia
                flip = -1.0
            ax, ay, bx, by = us[ia], vs[ia], us[ib], vs[ib]
            # (bx - ax) * (py - ay) - (by - ay) * (px - ax)
            coef[t, e, 0] = -(by - ay) * flip
            coef[t, e, 1] = (bx - ax) * flip
            coef[t, e, 2] = ((by - ay) * ax - (bx - ax) * ay) * flip
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        area = (us[i1] - us[i0]) * (vs[i2] - vs[i0]) - (vs[i1] - vs[i0]) * (us[i2] - us[i0])
        if area != 0.0:
            ok[t] = True
            if area < 0.0:
                for e in range(3):
                    for c in range(3):
                        coef[t, e, c] = -coef[t, e, c]
    return coef, ok


@numba.njit(cache=True)
def _zbuffer(us, vs, zs, tris, coef, draw, width, height, ss):
    sw, sh = width * ss, height * ss
    zbuf = np.full((sh, sw), np.inf)
    tid = np.full((sh, sw), -1, dtype=np.int32)
    for t in range(tris.shape[0]):
        if not draw[t]:
            continue
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        umin, umax = min(us[i0], us[i1], us[i2]), max(us[i0], us[i1], us[i2])
        vmin, vmax = min(vs[i0], vs[i1], vs[i2]), max(vs[i0], vs[i1], vs[i2])
        jlo = max(0, int(np.ceil(umin * ss - 0.5)))
        jhi = min(sw - 1, int(np.floor(umax * ss - 0.5)))
        ilo = max(0, int(np.ceil(vmin * ss - 0.5)))
        ihi = min(sh - 1, int(np.floor(vmax * ss - 0.5)))
        if jlo > jhi or ilo > ihi:
            continue
        a0, b0, c0 = coef[t, 0, 0], coef[t, 0, 1], coef[t, 0, 2]
        a1, b1, c1 = coef[t, 1, 0], coef[t, 1, 1], coef[t, 1, 2]
        a2, b2, c2 = coef[t, 2, 0], coef[t, 2, 1], coef[t, 2, 2]
        iz0, iz1, iz2 = 1.0 / zs[i0], 1.0 / zs[i1], 1.0 / zs[i2]
        for i in range(ilo, ihi + 1):
            py = (i + 0.5) / ss
            r0 = b0 * py + c0
            r1 = b1 * py + c1
            r2 = b2 * py + c2
            # conservative row span from the three half-planes; exact test below
            xlo, xhi = umin, umax
            if a0 > 0.0:
                xlo = max(xlo, -r0 / a0)
            elif a0 < 0.0:
                xhi = min(xhi, -r0 / a0)
            elif r0 < 0.0:
                continue
            if a1 > 0.0:
                xlo = max(xlo, -r1 / a1)
            elif a1 < 0.0:
                xhi = min(xhi, -r1 / a1)
            elif r1 < 0.0:
                continue
            if a2 > 0.0:
                xlo = max(xlo, -r2 / a2)
            elif a2 < 0.0:
                xhi = min(xhi, -r2 / a2)
            elif r2 < 0.0:
                continue
            if xlo > xhi:
                continue
            j0 = max(jlo, int(np.ceil(xlo * ss - 0.5)) - 1)
            j1 = min(jhi, int(np.floor(xhi * ss - 0.5)) + 1)
            for j in range(j0, j1 + 1):
                px = (j + 0.5) / ss
                e0 = a0 * px + r0
                e1 = a1 * px + r1
                e2 = a2 * px + r2
                if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                    continue
                s = e0 + e1 + e2
                if s <= 0.0:
                    continue
                z = s / (e0 * iz0 + e1 * iz1 + e2 * iz2)
                if z < zbuf[i, j]:
                    zbuf[i, j] = z
                    tid[i, j] = t
    return zbuf, tid


@numba.njit(cache=True)
def _resolve(zbuf, tid, zs, tris, coef, nocs_attr, rgb_attr, width, height, ss):
    mask = np.zeros((height, width))
    depth = np.full((height, width), np.inf)
    nocs = np.zeros((height, width, 3))
    rgb = np.zeros((height, width, 3))
    izs = 1.0 / zs
    acc = np.zeros(6)
    for y in range(height):
        for x in range(width):
            n = 0
            acc_d = 0.0
            acc[:] = 0.0
            for a in range(ss):
                i = y * ss + a
                py = (i + 0.5) / ss
                for b in range(ss):
                    j = x * ss + b
                    t = tid[i, j]
                    if t < 0:
                        continue
                    px = (j + 0.5) / ss
                    i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
                    w0 = (coef[t, 0, 0] * px + coef[t, 0, 1] * py + coef[t, 0, 2]) * izs[i0]
                    w1 = (coef[t, 1, 0] * px + coef[t, 1, 1] * py + coef[t, 1, 2]) * izs[i1]
                    w2 = (coef[t, 2, 0] * px + coef[t, 2, 1] * py + coef[t, 2, 2]) * izs[i2]
                    inv = 1.0 / (w0 + w1 + w2)
                    w0 *= inv
                    w1 *= inv
                    w2 *= inv
                    for c in range(3):
                        acc[c] += w0 * nocs_attr[i0, c] + w1 * nocs_attr[i1, c] + w2 * nocs_attr[i2, c]
                        acc[3 + c] += w0 * rgb_attr[i0, c] + w1 * rgb_attr[i1, c] + w2 * rgb_attr[i2, c]
                    acc_d += zbuf[i, j]
                    n += 1
            if n == 0:
                continue
            mask[y, x] = n / (ss * ss)
            depth[y, x] = acc_d / n
            for c in range(3):
                nocs[y, x, c] = min(max(acc[c] / n, 0.0), 1.0)
                rgb[y, x, c] = min(max(acc[3 + c] / n, 0.0), 1.0)
    return mask, depth, nocs, rgb


def rasterize(mesh: TriangleMesh, pose: PoseSE3, k: CameraIntrinsics, supersample: int = 4) -> RenderBuffers:
    """Render RGB, fractional coverage, camera depth and NOCS for ``mesh`` seen from ``pose``."""
    if supersample < 1:
        raise ValueError("supersample must be >= 1")
    w, h = k.width, k.height
    if mesh.is_empty():
        return RenderBuffers(np.zeros((h, w, 3)), np.zeros((h, w)), np.full((h, w), np.inf), np.zeros((h, w, 3)))
    cam = pose.apply(mesh.vertices)
    zs = np.ascontiguousarray(cam[:, 2])
    safe = np.where(zs > NEAR_PLANE, zs, 1.0)
    us = np.ascontiguousarray(k.fx * cam[:, 0] / safe + k.cx)
    vs = np.ascontiguousarray(k.fy * cam[:, 1] / safe + k.cy)
    tris = mesh.triangles
    coef, nondegenerate = _edge_coefficients(us, vs, tris)
    draw = np.all(zs[tris] > NEAR_PLANE, axis=1) & nondegenerate
    zbuf, tid = _zbuffer(us, vs, zs, tris, coef, draw, w, h, supersample)
    nocs_attr = mesh.vertex_nocs if mesh.vertex_nocs is not None else np.zeros((mesh.n_vertices, 3))
    mask, depth, nocs, rgb = _resolve(zbuf, tid, zs, tris, coef, nocs_attr, mesh.colors(), w, h, supersample)
    return RenderBuffers(rgb=rgb, mask=mask, depth=depth, nocs=nocs)


def render_nocs_view(mesh: TriangleMesh, pose: PoseSE3, k: CameraIntrinsics, supersample: int = 4) -> NocsMap:
    if mesh.is_empty():
        raise EmptyMesh("cannot render an empty mesh")
    if mesh.vertex_nocs is None:
        raise ValueError("mesh has no NOCS coordinates")
    buf = rasterize(mesh, pose, k, supersample)
    valid = buf.valid
    return NocsMap(np.where(valid[..., None], buf.nocs, 0.0), valid)
