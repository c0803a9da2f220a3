"""Rigid-body and pinhole camera math.

Poses map points from the NOCS (object) frame into an OpenCV-style camera
frame: x right, y down, z forward. The world/NOCS up axis is +y and azimuth
is measured about +y, starting at +z and increasing towards +x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import NonPositiveDepth

NOCS_CENTER = np.array([0.5, 0.5, 0.5])
WORLD_UP = np.array([0.0, 1.0, 0.0])

# Target ring: alternating elevations, 60 degree azimuth spacing.
RING_ELEVATIONS_DEG = (20.0, -10.0, 20.0, -10.0, 20.0, -10.0)
RING_AZIMUTH_STEP_DEG = 60.0


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform x -> R @ x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera optical center expressed in the source (NOCS) frame."""
        return -self.rotation.T @ self.translation

    def forward_axis(self) -> np.ndarray:
        """Unit viewing direction (+z of the camera) in the source frame."""
        return self.rotation[2].copy()

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return compose(self, other)

    def to_json(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "convention": "opencv",
        }

    @classmethod
    def from_json(cls, d: dict) -> "PoseSE3":
        if d.get("convention") != "opencv":
            raise ValueError(f"unsupported pose convention: {d.get('convention')!r}")
        return cls(d["rotation"], d["translation"])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int, cx=None, cy=None) -> "CameraIntrinsics":
        """Square pixels with the horizontal field of view ``fov_deg``."""
        f = (width / 2.0) / np.tan(np.deg2rad(fov_deg) / 2.0)
        return cls(f, f, width / 2.0 if cx is None else cx, height / 2.0 if cy is None else cy, width, height)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def fov_x_deg(self) -> float:
        return float(np.rad2deg(2.0 * np.arctan(self.width / (2.0 * self.fx))))

    def resized(self, width: int, height: int) -> "CameraIntrinsics":
        """Same camera at another image resolution (pixel grid rescaled)."""
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class SphericalPose:
    """Camera on a viewing sphere around ``target``, looking at it."""

    elevation: float
    azimuth: float
    radius: float
    target: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if not -90.0 <= self.elevation <= 90.0:
            raise ValueError("elevation must be within [-90, 90] degrees")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))

    def camera_center(self) -> np.ndarray:
        el, az = np.deg2rad(self.elevation), np.deg2rad(self.azimuth)
        d = np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        return np.asarray(self.target) + self.radius * d

    def to_pose(self) -> PoseSE3:
        return look_at(self.camera_center(), self.target)

    @classmethod
    def from_pose(cls, pose: PoseSE3, target=(0.5, 0.5, 0.5)) -> "SphericalPose":
        d = pose.camera_center() - np.asarray(target, dtype=np.float64)
        r = float(np.linalg.norm(d))
        el = float(np.rad2deg(np.arcsin(np.clip(d[1] / r, -1.0, 1.0))))
        az = float(np.rad2deg(np.arctan2(d[0], d[2])))
        return cls(el, az, r, tuple(target))


def look_at(eye, target, up=WORLD_UP) -> PoseSE3:
    """OpenCV camera at ``eye`` whose optical axis passes through ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight up or down; any horizontal right vector works
        right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return PoseSE3(rot, -rot @ eye)


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """Pose mapping x to a(b(x))."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def relative_pose(xi_i: PoseSE3, xi_j: PoseSE3) -> PoseSE3:
    """Relative camera pose between views i and j.

    Both inputs map the shared NOCS frame into their camera frames. The
    result maps camera-j coordinates into camera-i coordinates, which is the
    product xi_i^-1 xi_j written with camera-to-world poses. It does not
    depend on the choice of NOCS frame: pre-composing both inputs with any
    common rigid transform leaves it unchanged.
    """
    return compose(xi_i, xi_j.inverse())


def rotation_angle_deg(r) -> float:
    # atan2 of sine and cosine parts stays accurate near 0 and 180 degrees
    r = np.asarray(r, dtype=np.float64)
    c = (np.trace(r) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return float(np.rad2deg(np.arctan2(s, c)))


def rotation_error_deg(r_pred, r_gt) -> float:
    """Geodesic angle between two rotations, in degrees within [0, 180]."""
    return rotation_angle_deg(np.asarray(r_pred) @ np.asarray(r_gt).T)


def skew(w) -> np.ndarray:
    x, y, z = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()


def so3_log(r) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(r, dtype=np.float64)).as_rotvec()


def project_to_so3(m) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense (orthogonal Procrustes)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def se3_local_step(base: PoseSE3, delta, pivot=None) -> PoseSE3:
    """Apply a 6-dof increment (omega, v) on the left of ``base``.

    A camera-frame point X becomes exp([omega]x) @ (X - c) + c + v, where c
    is ``pivot`` (camera-frame coordinates, default the camera origin).
    A zero delta returns ``base`` exactly.
    """
    delta = np.asarray(delta, dtype=np.float64)
    if not np.any(delta):
        return base
    r = so3_exp(delta[:3])
    t = r @ base.translation + delta[3:]
    if pivot is not None:
        c = np.asarray(pivot, dtype=np.float64)
        t = t + c - r @ c
    return PoseSE3(r @ base.rotation, t)


def se3_local_delta(base: PoseSE3, stepped: PoseSE3) -> np.ndarray:
    """Inverse of :func:`se3_local_step` with the default pivot."""
    r = stepped.rotation @ base.rotation.T
    omega = so3_log(r)
    v = stepped.translation - so3_exp(omega) @ base.translation
    return np.concatenate([omega, v])


def project(point, k: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame point(s) to pixel coordinates."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("cannot project a point with z <= 0")
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1)


def unproject(pixel, depth, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point at ``depth`` (camera z) along the ray of ``pixel``."""
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (px[..., 0] - k.cx) / k.fx * d
    y = (px[..., 1] - k.cy) / k.fy * d
    return np.stack([x, y, d * np.ones_like(x)], axis=-1)


def target_camera_ring(
    phi0: float,
    radius: float,
    azimuth_offset: float = 0.0,
    target: Sequence[float] = (0.5, 0.5, 0.5),
) -> list[PoseSE3]:
    """The six fixed multi-view target cameras relative to the first input azimuth."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    poses = []
    for i, el in enumerate(RING_ELEVATIONS_DEG):
        az = phi0 + azimuth_offset + RING_AZIMUTH_STEP_DEG * i
        poses.append(SphericalPose(el, az, radius, tuple(target)).to_pose())
    return poses
